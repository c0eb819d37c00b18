//! Iterative text interpretation: the user's text goes to the detector
//! as-is; while the detector finds nothing, a language model rewrites the
//! text with the detector's feedback, up to `max_iterations` attempts.

pub mod llm;
pub mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, RetryPolicy};
use crate::vision::{self, DetectionSet, ImageRef, VisionBackend};

pub use llm::{LlmBackend, MockLlm, RemoteLlm, ScriptedReply};
pub use prompt::{strip_reply, PromptTemplate};

/// Exchanges kept per session; older ones are dropped from the front.
pub const HISTORY_CAP: usize = 50;

#[derive(Debug, Error)]
pub enum InterpreterError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid session state: {0}")]
    State(String),
    #[error("invalid interpreter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpreterConfig {
    /// Vision attempts per budget.
    pub max_iterations: u32,
    /// Detections below this confidence do not count as a match.
    pub match_threshold: f64,
    pub retry: RetryPolicy,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            match_threshold: 0.25,
            retry: RetryPolicy::default(),
        }
    }
}

impl InterpreterConfig {
    pub fn validate(&self) -> Result<(), InterpreterError> {
        if self.max_iterations == 0 {
            return Err(InterpreterError::Config("max_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(InterpreterError::Config(format!(
                "match_threshold {} outside [0, 1]",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Pending,
    Succeeded,
    Exhausted,
    UserAbort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    /// The text the model was asked to reinterpret.
    pub request: String,
    pub vision_feedback: Option<String>,
    /// Stripped reply; empty when the model returned nothing usable.
    pub reply: String,
}

/// One detector query and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionAttempt {
    pub text: String,
    pub boxes: usize,
    pub max_confidence: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationSession {
    pub id: String,
    pub original_text: String,
    pub current_text: String,
    pub history: Vec<Exchange>,
    /// Exchanges dropped by the history cap, for stable numbering.
    pub history_offset: usize,
    /// Interpreter calls in the current budget.
    pub iteration: u32,
    pub state: SessionState,
    /// Set once the user accepts a result; the session is then final.
    pub accepted: bool,
    /// User note waiting to be sent with the next interpretation.
    pub pending_feedback: Option<String>,
    pub transcript: Vec<VisionAttempt>,
}

impl InterpretationSession {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            id: id.into(),
            original_text: text.clone(),
            current_text: text,
            history: Vec::new(),
            history_offset: 0,
            iteration: 0,
            state: SessionState::Pending,
            accepted: false,
            pending_feedback: None,
            transcript: Vec::new(),
        }
    }

    pub fn push_exchange(&mut self, ex: Exchange) {
        self.history.push(ex);
        if self.history.len() > HISTORY_CAP {
            let extra = self.history.len() - HISTORY_CAP;
            self.history.drain(..extra);
            self.history_offset += extra;
        }
    }

    pub fn abort(&mut self) -> Result<(), InterpreterError> {
        if self.accepted {
            return Err(InterpreterError::State("session already accepted".into()));
        }
        self.state = SessionState::UserAbort;
        Ok(())
    }
}

/// Asks the model to reinterpret the session's current text. Returns the
/// stripped reply, or `None` for an empty one (the current text is kept).
/// Transport failures leave the session untouched.
pub fn interpret_once(
    session: &mut InterpretationSession,
    template: &PromptTemplate,
    llm: &dyn LlmBackend,
    retry: &RetryPolicy,
    vision_feedback: Option<&str>,
) -> Result<Option<String>, InterpreterError> {
    if session.state != SessionState::Pending {
        return Err(InterpreterError::State(format!("session is {:?}", session.state)));
    }
    let prompt = template.render(session, vision_feedback);
    let raw = retry.run(|| llm.interpret(&prompt, &session.id))?;
    let reply = strip_reply(&raw);
    session.push_exchange(Exchange {
        prompt,
        request: session.current_text.clone(),
        vision_feedback: vision_feedback.map(str::to_owned),
        reply: reply.clone(),
    });
    session.iteration += 1;
    if reply.is_empty() {
        return Ok(None);
    }
    session.current_text = reply.clone();
    Ok(Some(reply))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LoopOutcome {
    /// Detections at or above the match threshold, for the final text.
    Matched { text: String, detections: DetectionSet },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub outcome: LoopOutcome,
    pub vision_calls: u32,
    pub interpreter_calls: u32,
    /// This run's detector queries, in order.
    pub transcript: Vec<VisionAttempt>,
}

pub fn feedback_sentence(d: &DetectionSet) -> String {
    format!(
        "vision returned {} boxes with max confidence {:.2} for: {}",
        d.boxes.len(),
        d.max_confidence(),
        d.query
    )
}

/// Runs one iteration budget on a pending session.
///
/// A fresh session queries the detector with the user's text first. A
/// session reopened by a rejection starts with an interpretation carrying
/// the user's note. Either way at most `max_iterations` detector queries
/// are made; when all of them miss, the outcome is `Exhausted` and the
/// interpreter has been called `max_iterations` times.
pub fn run_interpretation_loop(
    session: &mut InterpretationSession,
    template: &PromptTemplate,
    config: &InterpreterConfig,
    llm: &dyn LlmBackend,
    vision_backend: &dyn VisionBackend,
    image: &ImageRef,
) -> Result<LoopReport, InterpreterError> {
    config.validate()?;
    if session.state != SessionState::Pending {
        return Err(InterpreterError::State(format!("session is {:?}", session.state)));
    }
    let mut report = LoopReport {
        outcome: LoopOutcome::Exhausted,
        vision_calls: 0,
        interpreter_calls: 0,
        transcript: Vec::new(),
    };
    let mut feedback = session.pending_feedback.clone();
    let interpret_first = feedback.is_some();

    for _ in 0..config.max_iterations {
        if interpret_first {
            interpret_once(session, template, llm, &config.retry, feedback.as_deref())?;
            report.interpreter_calls += 1;
            session.pending_feedback = None;
        }
        let text = session.current_text.clone();
        let detections = config.retry.run(|| vision::detect(&text, image, vision_backend))?;
        report.vision_calls += 1;
        let hits = detections.above(config.match_threshold);
        let attempt = VisionAttempt {
            text: text.clone(),
            boxes: detections.boxes.len(),
            max_confidence: detections.max_confidence(),
            matched: !hits.is_empty(),
        };
        session.transcript.push(attempt.clone());
        report.transcript.push(attempt);
        if !hits.is_empty() {
            session.state = SessionState::Succeeded;
            report.outcome = LoopOutcome::Matched { text, detections: hits };
            return Ok(report);
        }
        let sentence = feedback_sentence(&detections);
        if interpret_first {
            feedback = Some(sentence);
        } else {
            interpret_once(session, template, llm, &config.retry, Some(&sentence))?;
            report.interpreter_calls += 1;
        }
    }
    session.state = SessionState::Exhausted;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Accept finalizes a succeeded session. Reject reopens a succeeded or
/// exhausted session with a fresh budget; the note (or a generic sentence)
/// goes to the interpreter on the next run.
pub fn apply_user_feedback(
    session: &mut InterpretationSession,
    verdict: Verdict,
    note: Option<&str>,
) -> Result<(), InterpreterError> {
    if session.accepted {
        return Err(InterpreterError::State("session already accepted".into()));
    }
    match (verdict, session.state) {
        (Verdict::Accept, SessionState::Succeeded) => {
            session.accepted = true;
            Ok(())
        }
        (Verdict::Reject, SessionState::Succeeded | SessionState::Exhausted) => {
            let note = note
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .map(str::to_owned)
                .unwrap_or_else(|| format!("the user rejected the result for: {}", session.current_text));
            session.state = SessionState::Pending;
            session.iteration = 0;
            session.pending_feedback = Some(note);
            Ok(())
        }
        (_, state) => Err(InterpreterError::State(format!("cannot apply {verdict:?} to a {state:?} session"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{Box2D, MockVision, VisionScenarioEntry};

    fn image() -> ImageRef {
        ImageRef::new(0, 64, 48, vec![], "image/png")
    }

    fn hit(substr: &str, conf: f64) -> VisionScenarioEntry {
        VisionScenarioEntry {
            match_text_substring: substr.into(),
            frame_id: None,
            boxes: vec![Box2D::new(1.0, 1.0, 10.0, 10.0, conf, substr)],
            mask_mode: Default::default(),
            masks: vec![],
        }
    }

    fn llm() -> MockLlm {
        MockLlm::new(vec![
            ScriptedReply { expect: "Request: labeling the balloon on the road".into(), reply: "\"floating toy\"".into() },
            ScriptedReply { expect: "Request: floating toy".into(), reply: "balloon".into() },
            ScriptedReply { expect: "Request:".into(), reply: "".into() },
        ])
    }

    #[test]
    fn interpret_once_grows_history() {
        let mut s = InterpretationSession::new("s", "labeling the balloon on the road");
        let t = PromptTemplate::default();
        let r = RetryPolicy::default();
        assert_eq!(interpret_once(&mut s, &t, &llm(), &r, None).unwrap().as_deref(), Some("floating toy"));
        assert_eq!(interpret_once(&mut s, &t, &llm(), &r, None).unwrap().as_deref(), Some("balloon"));
        assert_eq!(interpret_once(&mut s, &t, &llm(), &r, None).unwrap(), None);
        assert_eq!(s.history.len(), 3);
        assert_eq!(s.iteration, 3);
        assert_eq!(s.current_text, "balloon");
        assert_eq!(s.state, SessionState::Pending);
    }

    #[test]
    fn low_confidence_is_a_miss() {
        let vision = MockVision::new(vec![hit("floating toy", 0.1), hit("balloon", 0.8)]);
        let mut s = InterpretationSession::new("s", "labeling the balloon on the road");
        let cfg = InterpreterConfig::default();
        let r = run_interpretation_loop(&mut s, &PromptTemplate::default(), &cfg, &llm(), &vision, &image()).unwrap();
        assert_eq!((r.vision_calls, r.interpreter_calls), (1, 0));

        let vision = MockVision::new(vec![hit("labeling", 0.1), hit("floating toy", 0.2), hit("balloon", 0.8)]);
        let mut s = InterpretationSession::new("s", "labeling the balloon on the road");
        let r = run_interpretation_loop(&mut s, &PromptTemplate::default(), &cfg, &llm(), &vision, &image()).unwrap();
        assert_eq!((r.vision_calls, r.interpreter_calls), (3, 2));
        assert!(s.history[1].vision_feedback.as_deref().unwrap().contains("max confidence 0.20 for: floating toy"));
        match r.outcome {
            LoopOutcome::Matched { text, detections } => {
                assert_eq!(text, "balloon");
                assert_eq!(detections.boxes.len(), 1);
            }
            LoopOutcome::Exhausted => panic!("expected a match"),
        }
    }

    #[test]
    fn reject_reopens_with_note() {
        let vision = MockVision::new(vec![hit("balloon", 0.9)]);
        let cfg = InterpreterConfig { max_iterations: 3, ..Default::default() };
        let t = PromptTemplate::default();
        let llm = MockLlm::new(vec![
            ScriptedReply { expect: "wrong object, the LEFT balloon".into(), reply: "left balloon".into() },
        ]);
        let mut s = InterpretationSession::new("s", "balloon");
        assert!(apply_user_feedback(&mut s, Verdict::Accept, None).is_err());
        run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).unwrap();
        assert_eq!(s.state, SessionState::Succeeded);

        apply_user_feedback(&mut s, Verdict::Reject, Some("wrong object, the LEFT balloon")).unwrap();
        assert_eq!(s.state, SessionState::Pending);
        let r = run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).unwrap();
        assert_eq!((r.vision_calls, r.interpreter_calls), (1, 1));
        assert!(s.history[0].prompt.contains("wrong object, the LEFT balloon"));
        assert_eq!(s.current_text, "left balloon");

        apply_user_feedback(&mut s, Verdict::Reject, Some("wrong object, the LEFT balloon")).unwrap();
        let r = run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).unwrap();
        assert_eq!(r.interpreter_calls, 1);
        assert_eq!(s.history.len(), 2);

        apply_user_feedback(&mut s, Verdict::Accept, None).unwrap();
        assert!(apply_user_feedback(&mut s, Verdict::Reject, None).is_err());
        assert!(apply_user_feedback(&mut s, Verdict::Accept, None).is_err());
    }

    #[test]
    fn exhausted_then_reject_gets_fresh_budget() {
        let vision = MockVision::default();
        let cfg = InterpreterConfig { max_iterations: 2, ..Default::default() };
        let llm = MockLlm::new(vec![ScriptedReply { expect: "Request:".into(), reply: "thing".into() }]);
        let mut s = InterpretationSession::new("s", "x");
        let t = PromptTemplate::default();
        let r = run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).unwrap();
        assert_eq!(r.outcome, LoopOutcome::Exhausted);
        assert!(run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).is_err());
        apply_user_feedback(&mut s, Verdict::Reject, None).unwrap();
        let r = run_interpretation_loop(&mut s, &t, &cfg, &llm, &vision, &image()).unwrap();
        assert_eq!((r.vision_calls, r.interpreter_calls), (2, 2));
        assert_eq!(s.transcript.len(), 4);
    }

    #[test]
    fn history_is_capped() {
        let mut s = InterpretationSession::new("s", "x");
        for k in 0..60 {
            s.push_exchange(Exchange { prompt: String::new(), request: k.to_string(), vision_feedback: None, reply: String::new() });
        }
        assert_eq!(s.history.len(), HISTORY_CAP);
        assert_eq!(s.history_offset, 10);
        assert_eq!(s.history[0].request, "10");
    }

    #[test]
    fn zero_budget_rejected() {
        let cfg = InterpreterConfig { max_iterations: 0, ..Default::default() };
        let mut s = InterpretationSession::new("s", "x");
        let r = run_interpretation_loop(&mut s, &PromptTemplate::default(), &cfg, &MockLlm::default(), &MockVision::default(), &image());
        assert!(matches!(r, Err(InterpreterError::Config(_))));
    }
}
