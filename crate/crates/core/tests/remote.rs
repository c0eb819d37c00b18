use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use label3d_core::backend::{BackendError, RetryPolicy};
use label3d_core::interpreter::{LlmBackend, RemoteLlm};
use label3d_core::vision::{self, ImageRef, RemoteVision, VisionBackend};

#[derive(Default)]
struct Stub {
    detect_calls: AtomicU32,
}

async fn detect(State(stub): State<Arc<Stub>>, Json(body): Json<Value>) -> Response {
    let n = stub.detect_calls.fetch_add(1, Ordering::SeqCst);
    assert!(body["image_b64"].is_string());
    match body["text"].as_str().unwrap_or("") {
        "teapot" => (StatusCode::BAD_REQUEST, "no").into_response(),
        "garbled" => "{\"boxes\": [1,2".into_response(),
        "flaky" if n == 0 => (StatusCode::SERVICE_UNAVAILABLE, "later").into_response(),
        text => Json(json!({ "boxes": [
            { "x0": 10.0, "y0": 10.0, "x1": 20.0, "y1": 30.0, "conf": 0.8, "phrase": text },
            { "x0": -5.0, "y0": 0.0, "x1": 900.0, "y1": 5.0, "conf": 0.9, "phrase": text }
        ]}))
        .into_response(),
    }
}

async fn segment(Json(body): Json<Value>) -> Response {
    let boxes = body["boxes"].as_array().unwrap();
    let masks: Vec<Value> = boxes
        .iter()
        .enumerate()
        .map(|(i, _)| json!({ "width": 64, "height": 48, "rle": [0, 64 * 48], "box_index": i }))
        .collect();
    Json(json!({ "masks": masks })).into_response()
}

async fn interpret(Json(body): Json<Value>) -> Response {
    let prompt = body["prompt"].as_str().unwrap();
    if prompt.contains("boom") {
        return (StatusCode::INTERNAL_SERVER_ERROR, "boom").into_response();
    }
    Json(json!({ "text": format!("  \"{}\"\nextra", body["session_id"].as_str().unwrap()) })).into_response()
}

/// Serves the stub on a background runtime and returns its base URL.
fn spawn_stub() -> (String, Arc<Stub>, tokio::runtime::Runtime) {
    let stub = Arc::new(Stub::default());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/v1/detect", post(detect))
        .route("/v1/segment", post(segment))
        .route("/v1/interpret", post(interpret))
        .with_state(stub.clone());
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/"), stub, rt)
}

fn image() -> ImageRef {
    ImageRef::new(0, 64, 48, vec![1, 2, 3], "image/png")
}

#[test]
fn detect_and_segment_round_trip() {
    let (url, _, _rt) = spawn_stub();
    let backend = RemoteVision::new(url, Duration::from_secs(5));
    let set = vision::detect("cone", &image(), &backend).unwrap();
    assert_eq!(set.boxes.len(), 2);
    // sorted by confidence and clamped to the image
    assert_eq!(set.boxes[0].confidence, 0.9);
    assert_eq!((set.boxes[0].x_min, set.boxes[0].x_max), (0.0, 64.0));
    let masks = vision::segment(&set, &image(), &backend, 0.0).unwrap();
    assert_eq!(masks.len(), 2);
    // a full-image mask is cut down to its box
    assert_eq!(masks[1].popcount(), 10 * 20);
}

#[test]
fn client_errors_are_protocol_errors() {
    let (url, _, _rt) = spawn_stub();
    let backend = RemoteVision::new(url, Duration::from_secs(5));
    let e = backend.detect("teapot", &image()).unwrap_err();
    assert!(matches!(e, BackendError::Protocol { .. }), "{e:?}");
    assert!(!e.is_retryable());
    let e = backend.detect("garbled", &image()).unwrap_err();
    match e {
        BackendError::Protocol { payload, .. } => assert!(payload.contains("[1,2")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn server_errors_are_retried() {
    let (url, stub, _rt) = spawn_stub();
    let backend = RemoteVision::new(url, Duration::from_secs(5));
    let e = backend.detect("flaky", &image()).unwrap_err();
    assert!(e.is_retryable(), "{e:?}");
    let boxes = RetryPolicy::default().run(|| backend.detect("flaky", &image())).unwrap();
    assert_eq!(boxes.len(), 2);
    assert_eq!(stub.detect_calls.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_host_is_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = RemoteVision::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
    assert!(matches!(backend.detect("cone", &image()), Err(BackendError::Transport(_))));
    let llm = RemoteLlm::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
    assert!(matches!(llm.interpret("p", "s"), Err(BackendError::Transport(_))));
}

#[test]
fn remote_llm_returns_raw_text() {
    let (url, _, _rt) = spawn_stub();
    let llm = RemoteLlm::new(url, Duration::from_secs(5));
    assert_eq!(llm.interpret("prompt", "s-1").unwrap(), "  \"s-1\"\nextra");
    assert!(llm.interpret("boom", "s").unwrap_err().is_retryable());
}
