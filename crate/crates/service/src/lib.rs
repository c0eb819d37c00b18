//! HTTP API over [`AnnotationService`] and helpers shared with the CLI.
//!
//! ```text
//! POST /sessions                                   {sequence_root, idempotency_key?, annotations_path?}
//! GET  /sessions/{id}
//! POST /sessions/{id}/requests                     {text, frame_start, frame_end, mode?}
//! GET  /sessions/{id}/candidates/{cid}
//! POST /sessions/{id}/candidates/{cid}/review      {verdict, note?}
//! GET  /sessions/{id}/audit
//! ```

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use label3d_core::interpreter::Verdict;
use label3d_core::service::{AnnotationRequest, AnnotationService, CreateSession, ServiceError};

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::warn!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type Shared = Arc<AnnotationService>;

/// Runs blocking service work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Data(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn create_session(State(svc): State<Shared>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    let id = blocking(move || svc.create_session(&req)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "state": "ready" }))).into_response())
}

async fn session_info(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let info = blocking(move || svc.session_info(&id)).await?;
    Ok(Json(info).into_response())
}

async fn submit(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<AnnotationRequest>,
) -> Result<Response, ApiError> {
    let out = blocking(move || svc.submit_request(&id, &req)).await?;
    Ok(Json(out).into_response())
}

async fn candidate(State(svc): State<Shared>, Path((id, cid)): Path<(String, String)>) -> Result<Response, ApiError> {
    let view = blocking(move || svc.candidate(&id, &cid)).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ReviewBody {
    pub verdict: Verdict,
    #[serde(default)]
    pub note: Option<String>,
}

async fn review(
    State(svc): State<Shared>,
    Path((id, cid)): Path<(String, String)>,
    Json(body): Json<ReviewBody>,
) -> Result<Response, ApiError> {
    let out = blocking(move || svc.review(&id, &cid, body.verdict, body.note.as_deref())).await?;
    Ok(Json(out).into_response())
}

async fn audit(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let entries = blocking(move || svc.audit(&id)).await?;
    Ok(Json(entries).into_response())
}

pub fn router(service: Arc<AnnotationService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/requests", post(submit))
        .route("/sessions/{id}/candidates/{cid}", get(candidate))
        .route("/sessions/{id}/candidates/{cid}/review", post(review))
        .route("/sessions/{id}/audit", get(audit))
        .with_state(service)
}

/// Parses frame lists like `0-9`, `3,5,7` or `0-2,8`. Output is sorted
/// and deduplicated.
pub fn parse_frames(s: &str) -> Result<Vec<u32>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| t.trim().parse::<u32>().map_err(|_| format!("bad frame number {t:?} in {s:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("descending range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("empty frame list".into());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
