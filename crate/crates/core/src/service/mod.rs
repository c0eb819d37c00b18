//! Session-oriented orchestration: text request → interpreter loop →
//! per-frame masks and 3D labels → temporal pass → candidate → review →
//! committed annotations.

pub mod audit;
pub mod config;
pub mod pipeline;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BackendError;
use crate::dataset::{
    load_annotations, open_sequence, save_annotations, AnnotationRecord, DatasetError, OpenOptions, Provenance,
    SequenceManifest, SCHEMA_VERSION,
};
use crate::geometry::{GeometryError, PointCloud};
use crate::interpreter::{
    apply_user_feedback, run_interpretation_loop, InterpretationSession, InterpreterError, LlmBackend, LoopOutcome,
    SessionState, Verdict, VisionAttempt,
};
use crate::lift::OrientedBox3D;
use crate::mask::RleMask;
use crate::temporal::{EntrySource, TemporalError};
use crate::vision::{DetectionSet, VisionBackend};

pub use audit::{AuditEntry, AuditLog};
pub use config::{BackendSpec, Mode, PipelineConfig};
pub use pipeline::{CandidateLabel, FrameResult};

use audit::{AuditedLlm, AuditedVision, InFlightLimit};
use pipeline::CommonFrame;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error("{0}")]
    State(String),
    #[error("session {0} is busy with another request")]
    Busy(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl From<InterpreterError> for ServiceError {
    fn from(e: InterpreterError) -> Self {
        match e {
            InterpreterError::Backend(b) => ServiceError::Backend(b),
            InterpreterError::State(s) => ServiceError::State(s),
            InterpreterError::Config(s) => ServiceError::BadRequest(s),
        }
    }
}

impl ServiceError {
    /// HTTP status class for the error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::Dataset(_) | ServiceError::Data(_) | ServiceError::Geometry(_) => 422,
            ServiceError::Backend(_) => 502,
            ServiceError::State(_) | ServiceError::Busy(_) => 409,
            ServiceError::NotFound(_) => 404,
            ServiceError::BadRequest(_) | ServiceError::Temporal(_) => 400,
            ServiceError::Config(_) => 500,
        }
    }

    /// CLI exit code: 3 for data problems, 4 for backend failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Dataset(_) | ServiceError::Data(_) | ServiceError::Geometry(_) => 3,
            ServiceError::Backend(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateSession {
    pub sequence_root: PathBuf,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    /// Defaults to `annotations.jsonl` under the sequence root.
    #[serde(default)]
    pub annotations_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub text: String,
    pub frame_start: u32,
    pub frame_end: u32,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateState {
    Pending,
    Committed,
    Superseded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub state: CandidateState,
    pub request: AnnotationRequest,
    pub mode: Mode,
    pub resolved_text: String,
    /// Interpreter exchanges spent on this request so far.
    pub iterations: u32,
    pub transcript: Vec<VisionAttempt>,
    pub frames: Vec<FrameResult>,
    pub labels: Vec<CandidateLabel>,
    pub backend: String,
}

impl Candidate {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        let now = Utc::now();
        self.labels
            .iter()
            .map(|l| AnnotationRecord {
                schema_version: SCHEMA_VERSION,
                frame_id: l.frame_id,
                instance_id: l.instance_id,
                class_text: l.class_text.clone(),
                point_indices: l.point_indices.clone(),
                bbox: l.bbox,
                provenance: Provenance {
                    prompt: self.request.text.clone(),
                    iterations: self.iterations,
                    backend: self.backend.clone(),
                },
                created_at: now,
            })
            .collect()
    }
}

/// sha256 over the indices as little-endian u64s.
pub fn point_digest(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelView {
    pub frame_id: u32,
    pub instance_id: u32,
    pub class_text: String,
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub confidence: f64,
    pub source: EntrySource,
    pub point_count: usize,
    pub point_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub frame_id: u32,
    pub detections: DetectionSet,
    pub masks: Vec<RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub state: CandidateState,
    pub mode: Mode,
    pub prompt: String,
    pub resolved_text: String,
    pub iterations: u32,
    pub transcript: Vec<VisionAttempt>,
    pub frames: Vec<FrameView>,
    pub labels: Vec<LabelView>,
}

impl From<&Candidate> for CandidateView {
    fn from(c: &Candidate) -> Self {
        Self {
            id: c.id.clone(),
            state: c.state,
            mode: c.mode,
            prompt: c.request.text.clone(),
            resolved_text: c.resolved_text.clone(),
            iterations: c.iterations,
            transcript: c.transcript.clone(),
            frames: c
                .frames
                .iter()
                .map(|f| FrameView { frame_id: f.frame_id, detections: f.detections.clone(), masks: f.masks.clone() })
                .collect(),
            labels: c
                .labels
                .iter()
                .map(|l| LabelView {
                    frame_id: l.frame_id,
                    instance_id: l.instance_id,
                    class_text: l.class_text.clone(),
                    bbox: l.bbox,
                    confidence: l.confidence,
                    source: l.source,
                    point_count: l.point_indices.len(),
                    point_digest: point_digest(&l.point_indices),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SubmitOutcome {
    Candidate { candidate: CandidateView },
    Exhausted { transcript: Vec<VisionAttempt>, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub candidate_id: String,
    pub state: CandidateState,
    /// Records written by this call; zero for a repeated accept.
    pub committed: usize,
    /// The re-run triggered by a rejection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<SubmitOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub id: String,
    pub state: CandidateState,
    pub labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub state: String,
    pub sequence_root: PathBuf,
    pub annotations_path: PathBuf,
    pub frames: usize,
    pub candidates: Vec<CandidateSummary>,
    pub interpreter: Option<InterpretationSession>,
}

#[derive(Serialize)]
struct SessionSnapshot<'a> {
    id: &'a str,
    sequence_root: &'a Path,
    annotations_path: &'a Path,
    interpreter: &'a Option<InterpretationSession>,
    candidates: &'a [Candidate],
    audit: Vec<AuditEntry>,
}

pub struct AnnotationSession {
    pub id: String,
    pub sequence_root: PathBuf,
    pub annotations_path: PathBuf,
    pub manifest: SequenceManifest,
    pub interpreter: Option<InterpretationSession>,
    pub candidates: Vec<Candidate>,
    pub audit: AuditLog,
}

impl AnnotationSession {
    fn candidate_index(&self, cid: &str) -> Result<usize, ServiceError> {
        self.candidates
            .iter()
            .position(|c| c.id == cid)
            .ok_or_else(|| ServiceError::NotFound(format!("candidate {cid}")))
    }

    fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            state: "ready".into(),
            sequence_root: self.sequence_root.clone(),
            annotations_path: self.annotations_path.clone(),
            frames: self.manifest.frame_ids.len(),
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateSummary { id: c.id.clone(), state: c.state, labels: c.labels.len() })
                .collect(),
            interpreter: self.interpreter.clone(),
        }
    }
}

pub struct AnnotationService {
    config: PipelineConfig,
    llm: Arc<dyn LlmBackend>,
    vision: Arc<dyn VisionBackend>,
    limit: InFlightLimit,
    sessions: RwLock<HashMap<String, Arc<Mutex<AnnotationSession>>>>,
    idempotency: Mutex<HashMap<String, String>>,
}

impl AnnotationService {
    pub fn new(config: PipelineConfig) -> Result<Self, ServiceError> {
        let (llm, vision) = config.build_backends()?;
        Self::with_backends(config, llm, vision)
    }

    pub fn with_backends(
        config: PipelineConfig,
        llm: Arc<dyn LlmBackend>,
        vision: Arc<dyn VisionBackend>,
    ) -> Result<Self, ServiceError> {
        config.interpreter.validate()?;
        if let Some(dir) = &config.state_dir {
            std::fs::create_dir_all(dir).map_err(|e| ServiceError::Config(format!("{}: {e}", dir.display())))?;
        }
        Ok(Self {
            limit: InFlightLimit::new(config.max_in_flight),
            config,
            llm,
            vision,
            sessions: RwLock::new(HashMap::new()),
            idempotency: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<String, ServiceError> {
        let mut keys = self.idempotency.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(id) = req.idempotency_key.as_ref().and_then(|k| keys.get(k)) {
            return Ok(id.clone());
        }
        let options = OpenOptions {
            camera_id: self.config.camera_id.clone(),
            image_size: None,
        };
        let manifest = open_sequence(&req.sequence_root, &options)?;
        let id = uuid::Uuid::new_v4().to_string();
        let session = AnnotationSession {
            id: id.clone(),
            sequence_root: req.sequence_root.clone(),
            annotations_path: req
                .annotations_path
                .clone()
                .unwrap_or_else(|| req.sequence_root.join("annotations.jsonl")),
            manifest,
            interpreter: None,
            candidates: Vec::new(),
            audit: AuditLog::new(),
        };
        self.persist(&session)?;
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        if let Some(k) = &req.idempotency_key {
            keys.insert(k.clone(), id.clone());
        }
        Ok(id)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<AnnotationSession>>, ServiceError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    /// Runs `f` with exclusive access to the session; a concurrent caller
    /// gets `Busy` instead of waiting.
    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut AnnotationSession) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let handle = self.handle(id)?;
        let mut guard = match handle.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ServiceError::Busy(id.to_owned())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let out = f(&mut guard);
        self.persist(&guard)?;
        out
    }

    fn persist(&self, s: &AnnotationSession) -> Result<(), ServiceError> {
        let Some(dir) = &self.config.state_dir else {
            return Ok(());
        };
        let snapshot = SessionSnapshot {
            id: &s.id,
            sequence_root: &s.sequence_root,
            annotations_path: &s.annotations_path,
            interpreter: &s.interpreter,
            candidates: &s.candidates,
            audit: s.audit.snapshot(),
        };
        let text = serde_json::to_string(&snapshot).map_err(|e| ServiceError::Data(e.to_string()))?;
        let path = dir.join(format!("{}.json", s.id));
        let tmp = dir.join(format!(".{}.json.tmp", s.id));
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ServiceError::Data(format!("{}: {e}", path.display())))
    }

    pub fn session_info(&self, id: &str) -> Result<SessionInfo, ServiceError> {
        let handle = self.handle(id)?;
        let guard = handle.lock().unwrap_or_else(|e| e.into_inner());
        Ok(guard.info())
    }

    pub fn audit(&self, id: &str) -> Result<Vec<AuditEntry>, ServiceError> {
        let handle = self.handle(id)?;
        let guard = handle.lock().unwrap_or_else(|e| e.into_inner());
        Ok(guard.audit.snapshot())
    }

    pub fn candidate(&self, id: &str, cid: &str) -> Result<CandidateView, ServiceError> {
        let handle = self.handle(id)?;
        let guard = handle.lock().unwrap_or_else(|e| e.into_inner());
        let k = guard.candidate_index(cid)?;
        Ok(CandidateView::from(&guard.candidates[k]))
    }

    /// Full candidate, including point indices.
    pub fn candidate_detail(&self, id: &str, cid: &str) -> Result<Candidate, ServiceError> {
        let handle = self.handle(id)?;
        let guard = handle.lock().unwrap_or_else(|e| e.into_inner());
        let k = guard.candidate_index(cid)?;
        Ok(guard.candidates[k].clone())
    }

    pub fn submit_request(&self, id: &str, req: &AnnotationRequest) -> Result<SubmitOutcome, ServiceError> {
        let text = req.text.trim();
        if text.is_empty() {
            return Err(ServiceError::BadRequest("empty text".into()));
        }
        let mode = req.mode.unwrap_or(self.config.mode);
        if req.frame_start > req.frame_end {
            return Err(ServiceError::BadRequest(format!(
                "frame_start {} after frame_end {}",
                req.frame_start, req.frame_end
            )));
        }
        if mode == Mode::KeyframeInterpolate && req.frame_start == req.frame_end {
            return Err(ServiceError::BadRequest("keyframe mode needs two distinct endpoint frames".into()));
        }
        self.with_session(id, |s| {
            for f in req.frame_start..=req.frame_end {
                if !s.manifest.contains(f) {
                    return Err(DatasetError::UnknownFrame(f).into());
                }
            }
            let mut interp = InterpretationSession::new(s.id.clone(), text);
            let outcome = self.run_request(s, &mut interp, req, mode);
            s.interpreter = Some(interp);
            outcome
        })
    }

    fn run_request(
        &self,
        s: &mut AnnotationSession,
        interp: &mut InterpretationSession,
        req: &AnnotationRequest,
        mode: Mode,
    ) -> Result<SubmitOutcome, ServiceError> {
        let llm = AuditedLlm { inner: self.llm.as_ref(), log: &s.audit, limit: &self.limit };
        let vision = AuditedVision { inner: self.vision.as_ref(), log: &s.audit, limit: &self.limit };
        let image = pipeline::image_for(&s.manifest, req.frame_start)?;
        let report = run_interpretation_loop(interp, &self.config.prompt, &self.config.interpreter, &llm, &vision, &image)?;
        let (text, detections) = match report.outcome {
            LoopOutcome::Exhausted => {
                return Ok(SubmitOutcome::Exhausted {
                    message: format!(
                        "no detections after {} attempts; please refine the text and try again",
                        report.vision_calls
                    ),
                    transcript: report.transcript,
                })
            }
            LoopOutcome::Matched { text, detections } => (text, detections),
        };

        let frames: Vec<u32> = (req.frame_start..=req.frame_end).collect();
        let clouds = self.load_clouds(&s.manifest, &frames)?;
        let processed: Vec<u32> = match mode {
            Mode::PerFrameFuse => frames.clone(),
            Mode::KeyframeInterpolate => vec![req.frame_start, req.frame_end],
        };
        let mut results = Vec::with_capacity(processed.len());
        let mut first = Some(detections);
        for &f in &processed {
            let given = if f == req.frame_start { first.take() } else { None };
            results.push(pipeline::process_frame(
                &s.manifest,
                &clouds[&f],
                f,
                &text,
                &text,
                given,
                &vision,
                &self.config,
            )?);
        }

        let labels = match mode {
            Mode::PerFrameFuse if results.len() > 1 => {
                let common = CommonFrame::new(&s.manifest, &clouds);
                pipeline::fuse_frames(&results, &common, &self.config)?
            }
            Mode::PerFrameFuse => pipeline::single_frame_candidates(&results[0]),
            Mode::KeyframeInterpolate => {
                let common = CommonFrame::new(&s.manifest, &clouds);
                pipeline::interpolate_frames(&results[0], &results[1], &common)?
            }
        };

        for c in s.candidates.iter_mut().filter(|c| c.state == CandidateState::Pending) {
            c.state = CandidateState::Superseded;
        }
        let candidate = Candidate {
            id: format!("c{}", s.candidates.len() + 1),
            state: CandidateState::Pending,
            request: req.clone(),
            mode,
            resolved_text: text,
            iterations: (interp.history_offset + interp.history.len()) as u32,
            transcript: interp.transcript.clone(),
            frames: results,
            labels,
            backend: format!("{}+{}", self.llm.name(), self.vision.name()),
        };
        let view = CandidateView::from(&candidate);
        s.candidates.push(candidate);
        Ok(SubmitOutcome::Candidate { candidate: view })
    }

    fn load_clouds(&self, manifest: &SequenceManifest, frames: &[u32]) -> Result<BTreeMap<u32, PointCloud>, ServiceError> {
        let loaded = self.config.exec.map(frames, |&f| manifest.load_frame(f).map(|fr| (f, fr.cloud)));
        loaded.into_iter().map(|r| r.map_err(ServiceError::from)).collect()
    }

    pub fn review(&self, id: &str, cid: &str, verdict: Verdict, note: Option<&str>) -> Result<ReviewOutcome, ServiceError> {
        self.with_session(id, |s| {
            let k = s.candidate_index(cid)?;
            match (verdict, s.candidates[k].state) {
                (Verdict::Accept, CandidateState::Committed) => Ok(ReviewOutcome {
                    candidate_id: cid.to_owned(),
                    state: CandidateState::Committed,
                    committed: 0,
                    next: None,
                }),
                (_, CandidateState::Superseded) | (Verdict::Reject, CandidateState::Committed) => Err(
                    ServiceError::State(format!("candidate {cid} is {:?}", s.candidates[k].state)),
                ),
                (Verdict::Accept, CandidateState::Pending) => {
                    if let Some(interp) = s.interpreter.as_mut() {
                        if interp.state == SessionState::Succeeded && !interp.accepted {
                            apply_user_feedback(interp, Verdict::Accept, None)?;
                        }
                    }
                    let records = s.candidates[k].records();
                    commit(&s.annotations_path, &records)?;
                    s.candidates[k].state = CandidateState::Committed;
                    Ok(ReviewOutcome {
                        candidate_id: cid.to_owned(),
                        state: CandidateState::Committed,
                        committed: records.len(),
                        next: None,
                    })
                }
                (Verdict::Reject, CandidateState::Pending) => {
                    let mut interp = s
                        .interpreter
                        .take()
                        .ok_or_else(|| ServiceError::State("no interpreter session to reopen".into()))?;
                    let reopened = if interp.state == SessionState::Pending {
                        // an earlier re-run failed before reaching the detector
                        interp.pending_feedback = note.map(str::to_owned).or(interp.pending_feedback.take());
                        Ok(())
                    } else {
                        apply_user_feedback(&mut interp, Verdict::Reject, note).map_err(ServiceError::from)
                    };
                    let request = s.candidates[k].request.clone();
                    let mode = s.candidates[k].mode;
                    let next = reopened.and_then(|_| self.run_request(s, &mut interp, &request, mode));
                    s.interpreter = Some(interp);
                    let next = next?;
                    s.candidates[k].state = CandidateState::Superseded;
                    Ok(ReviewOutcome {
                        candidate_id: cid.to_owned(),
                        state: CandidateState::Superseded,
                        committed: 0,
                        next: Some(next),
                    })
                }
            }
        })
    }
}

/// Appends records by rewriting the whole file through an atomic rename,
/// so an interrupted commit leaves the previous file intact.
pub fn commit(path: &Path, records: &[AnnotationRecord]) -> Result<(), ServiceError> {
    let mut all = if path.exists() { load_annotations(path)? } else { Vec::new() };
    all.extend_from_slice(records);
    save_annotations(&all, path)?;
    Ok(())
}
