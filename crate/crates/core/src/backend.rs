//! Errors and retry policy shared by the model backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Network or availability failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// The backend answered with something that breaks the wire contract.
    #[error("protocol error: {message}")]
    Protocol { message: String, payload: String },
    /// A scripted mock was asked something its scenario does not cover.
    #[error("scripted mock has no reply for: {0}")]
    Script(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }

    pub(crate) fn protocol(message: impl Into<String>, payload: impl Into<String>) -> Self {
        let err = BackendError::Protocol {
            message: message.into(),
            payload: payload.into(),
        };
        if let BackendError::Protocol { message, payload } = &err {
            tracing::warn!(%message, %payload, "malformed backend response");
        }
        err
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Extra attempts after the first transport failure.
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 0,
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    tracing::debug!(attempt, error = %e, "retrying backend call");
                    if self.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(self.backoff_ms * attempt as u64));
                    }
                }
                other => return other,
            }
        }
    }
}

/// Maps a ureq failure onto the backend error classes.
pub(crate) fn from_ureq(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
            BackendError::protocol(format!("HTTP {code}"), "")
        }
        other => BackendError::Transport(other.to_string()),
    }
}
