//! Language-model backends: a scripted mock and an HTTP client.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{from_ureq, BackendError};

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> String;
    /// Raw reply text; rule stripping happens in the caller.
    fn interpret(&self, prompt: &str, session_id: &str) -> Result<String, BackendError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn interpret(&self, prompt: &str, session_id: &str) -> Result<String, BackendError> {
        (**self).interpret(prompt, session_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedReply {
    /// Substring the full rendered prompt must contain.
    pub expect: String,
    pub reply: String,
}

/// First entry whose `expect` occurs in the prompt wins. Lookups are
/// stateless, so equal prompts always get equal replies.
#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    pub script: Vec<ScriptedReply>,
}

impl MockLlm {
    pub fn new(script: Vec<ScriptedReply>) -> Self {
        Self { script }
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let script = serde_json::from_str(text).map_err(|e| BackendError::protocol(e.to_string(), text))?;
        Ok(Self { script })
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl LlmBackend for MockLlm {
    fn name(&self) -> String {
        "mock-llm".into()
    }

    fn interpret(&self, prompt: &str, _session_id: &str) -> Result<String, BackendError> {
        self.script
            .iter()
            .find(|s| prompt.contains(&s.expect))
            .map(|s| s.reply.clone())
            .ok_or_else(|| {
                let request = prompt.lines().find(|l| l.starts_with("Request: ")).unwrap_or(prompt);
                BackendError::Script(request.to_owned())
            })
    }
}

/// `POST {base}/v1/interpret` `{prompt, session_id}` → `{text}`.
pub struct RemoteLlm {
    base_url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct InterpretReply {
    text: String,
}

impl RemoteLlm {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent,
        }
    }
}

impl LlmBackend for RemoteLlm {
    fn name(&self) -> String {
        format!("remote-llm:{}", self.base_url)
    }

    fn interpret(&self, prompt: &str, session_id: &str) -> Result<String, BackendError> {
        let url = format!("{}/v1/interpret", self.base_url);
        let text = self
            .agent
            .post(&url)
            .send_json(json!({ "prompt": prompt, "session_id": session_id }))
            .map_err(from_ureq)?
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let reply: InterpretReply = serde_json::from_str(&text).map_err(|e| BackendError::protocol(e.to_string(), text))?;
        Ok(reply.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_and_unmatched() {
        let mock = MockLlm::from_json(
            r#"[{"expect": "Request: labeling the balloon on the road", "reply": "balloon"},
                {"expect": "Request:", "reply": "object"}]"#,
        )
        .unwrap();
        assert_eq!(mock.interpret("Request: labeling the balloon on the road", "s").unwrap(), "balloon");
        assert_eq!(mock.interpret("Request: car", "s").unwrap(), "object");
        assert!(matches!(mock.interpret("nothing", "s"), Err(BackendError::Script(_))));
    }
}
