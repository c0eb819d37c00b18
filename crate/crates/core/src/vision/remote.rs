//! HTTP client for a detector/segmenter service.
//!
//! `POST {base}/v1/detect`  `{text, image_b64, media_type}` → `{boxes: [Box2D]}`
//! `POST {base}/v1/segment` `{boxes, image_b64}` → `{masks: [RleMask]}`

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::{Box2D, ImageRef, VisionBackend};
use crate::backend::{from_ureq, BackendError};
use crate::mask::RleMask;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub struct RemoteVision {
    base_url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct DetectReply {
    boxes: Vec<Box2D>,
}

#[derive(Deserialize)]
struct SegmentReply {
    masks: Vec<RleMask>,
}

impl RemoteVision {
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

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: serde_json::Value) -> Result<T, BackendError> {
        let url = format!("{}{path}", self.base_url);
        let text = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(from_ureq)?
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| BackendError::protocol(e.to_string(), text))
    }
}

impl VisionBackend for RemoteVision {
    fn name(&self) -> String {
        format!("remote-vision:{}", self.base_url)
    }

    fn detect(&self, text: &str, image: &ImageRef) -> Result<Vec<Box2D>, BackendError> {
        let body = json!({
            "text": text,
            "image_b64": base64::engine::general_purpose::STANDARD.encode(&image.content),
            "media_type": image.media_type,
        });
        Ok(self.post::<DetectReply>("/v1/detect", body)?.boxes)
    }

    fn segment(&self, boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError> {
        let body = json!({
            "boxes": boxes,
            "image_b64": base64::engine::general_purpose::STANDARD.encode(&image.content),
        });
        Ok(self.post::<SegmentReply>("/v1/segment", body)?.masks)
    }
}
