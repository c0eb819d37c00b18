//! Append-only record of backend traffic, and backend wrappers that
//! write to it.

use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::BackendError;
use crate::interpreter::LlmBackend;
use crate::mask::RleMask;
use crate::vision::{Box2D, ImageRef, VisionBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub backend: String,
    pub call: String,
    pub request: Value,
    /// `{"ok": ...}` or `{"error": "..."}`.
    pub response: Value,
}

#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    entries: Arc<Mutex<Vec<AuditEntry>>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<AuditEntry>) -> Self {
        Self {
            entries: Arc::new(Mutex::new(entries)),
        }
    }

    pub fn record(&self, backend: &str, call: &str, request: Value, response: Value) {
        let mut entries = self.entries.lock().expect("audit lock");
        let seq = entries.len() as u64;
        entries.push(AuditEntry {
            seq,
            at: Utc::now(),
            backend: backend.to_owned(),
            call: call.to_owned(),
            request,
            response,
        });
    }

    pub fn snapshot(&self) -> Vec<AuditEntry> {
        self.entries.lock().expect("audit lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("audit lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn outcome<T: Serialize>(r: &Result<T, BackendError>) -> Value {
    match r {
        Ok(v) => json!({ "ok": v }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut busy = self.busy.lock().expect("limit lock");
            while *busy >= self.max {
                busy = self.freed.wait(busy).expect("limit lock");
            }
            *busy += 1;
        }
        let out = f();
        *self.busy.lock().expect("limit lock") -= 1;
        self.freed.notify_one();
        out
    }
}

pub struct AuditedLlm<'a> {
    pub inner: &'a dyn LlmBackend,
    pub log: &'a AuditLog,
    pub limit: &'a InFlightLimit,
}

impl LlmBackend for AuditedLlm<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn interpret(&self, prompt: &str, session_id: &str) -> Result<String, BackendError> {
        let r = self.limit.run(|| self.inner.interpret(prompt, session_id));
        self.log.record(
            &self.inner.name(),
            "interpret",
            json!({ "prompt": prompt, "session_id": session_id }),
            outcome(&r),
        );
        r
    }
}

pub struct AuditedVision<'a> {
    pub inner: &'a dyn VisionBackend,
    pub log: &'a AuditLog,
    pub limit: &'a InFlightLimit,
}

impl VisionBackend for AuditedVision<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn detect(&self, text: &str, image: &ImageRef) -> Result<Vec<Box2D>, BackendError> {
        let r = self.limit.run(|| self.inner.detect(text, image));
        self.log.record(
            &self.inner.name(),
            "detect",
            json!({ "text": text, "frame_id": image.frame_id, "width": image.width, "height": image.height }),
            outcome(&r),
        );
        r
    }

    fn segment(&self, boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError> {
        let r = self.limit.run(|| self.inner.segment(boxes, image));
        self.log.record(
            &self.inner.name(),
            "segment",
            json!({ "boxes": boxes, "frame_id": image.frame_id }),
            outcome(&r),
        );
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::{MockLlm, ScriptedReply};

    #[test]
    fn records_each_call_once() {
        let log = AuditLog::new();
        let limit = InFlightLimit::new(1);
        let mock = MockLlm::new(vec![ScriptedReply { expect: "a".into(), reply: "b".into() }]);
        let llm = AuditedLlm { inner: &mock, log: &log, limit: &limit };
        llm.interpret("a", "s").unwrap();
        assert!(llm.interpret("z", "s").is_err());
        let entries = log.snapshot();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].response, json!({ "ok": "b" }));
        assert!(entries[1].response.get("error").is_some());
        assert_eq!((entries[0].seq, entries[1].seq), (0, 1));
    }

    #[test]
    fn limit_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let limit = Arc::new(InFlightLimit::new(2));
        let now = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limit, now, peak) = (limit.clone(), now.clone(), peak.clone());
                std::thread::spawn(move || {
                    limit.run(|| {
                        let n = now.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(n, Ordering::SeqCst);
                        std::thread::sleep(std::time::Duration::from_millis(5));
                        now.fetch_sub(1, Ordering::SeqCst);
                    })
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
