use serde::{Deserialize, Serialize};

use super::InterpretationSession;

pub const DEFAULT_HISTORY_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub role_preamble: String,
    pub output_rules: Vec<String>,
    pub history_window: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            role_preamble: "You rewrite annotation requests for an open-vocabulary object detector. \
                            The detector accepts short noun phrases naming visible objects."
                .into(),
            output_rules: vec![
                "Reply with a single noun phrase on one line.".into(),
                "Name only the object category to be labeled, without verbs or explanations.".into(),
                "Do not wrap the phrase in quotes.".into(),
                "If the detector found nothing, propose a more common or more visual synonym.".into(),
            ],
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

impl PromptTemplate {
    /// Renders the prompt for the session's current text. Sections always
    /// appear as Role, Rules, History, Request, then the optional feedback.
    pub fn render(&self, session: &InterpretationSession, vision_feedback: Option<&str>) -> String {
        let mut out = String::new();
        out.push_str("## Role\n");
        out.push_str(self.role_preamble.trim());
        out.push_str("\n\n## Rules\n");
        for (k, rule) in self.output_rules.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", k + 1, rule));
        }
        out.push_str("\n## History\n");
        let shown = session.history.len().min(self.history_window);
        let first = session.history.len() - shown;
        if shown == 0 {
            out.push_str("(none)\n");
        }
        for (k, ex) in session.history.iter().enumerate().skip(first) {
            let number = session.history_offset + k + 1;
            out.push_str(&format!("{number}. request: {}", ex.request));
            if let Some(fb) = &ex.vision_feedback {
                out.push_str(&format!(" | feedback: {fb}"));
            }
            out.push_str(&format!(" | reply: {}\n", ex.reply));
        }
        out.push_str("\n## Request\n");
        out.push_str(&format!("Request: {}\n", session.current_text));
        if let Some(fb) = vision_feedback {
            out.push_str("\n## Vision feedback\n");
            out.push_str(fb);
            out.push('\n');
        }
        out
    }
}

/// Enforces the output rules on a raw reply: trim, first line, no quotes.
pub fn strip_reply(raw: &str) -> String {
    let line = raw.trim().lines().next().unwrap_or("").trim();
    let quotes: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}'];
    line.trim_matches(quotes).trim().to_owned()
}
