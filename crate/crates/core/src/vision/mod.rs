//! Promptable vision stack behind one contract: text → 2D boxes → masks.
//!
//! [`detect`] and [`segment`] wrap any [`VisionBackend`] and enforce the
//! response invariants (clamping, ordering, mask dimensions, mask-in-box),
//! so mock and remote backends are interchangeable.

pub mod mock;
pub mod remote;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::mask::{Mask2D, RleMask};

pub use mock::{MockVision, VisionScenarioEntry};
pub use remote::RemoteVision;

/// Default dilation, in pixels, a mask may extend past its prompt box.
pub const DEFAULT_MASK_MARGIN: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub frame_id: u32,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub content: Vec<u8>,
    pub media_type: String,
}

impl ImageRef {
    pub fn new(frame_id: u32, width: u32, height: u32, content: Vec<u8>, media_type: impl Into<String>) -> Self {
        Self {
            frame_id,
            width,
            height,
            content,
            media_type: media_type.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.width == 0 || self.height == 0 {
            return Err(BackendError::protocol(
                format!("image {}x{} has no area", self.width, self.height),
                "",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    #[serde(rename = "x0")]
    pub x_min: f64,
    #[serde(rename = "y0")]
    pub y_min: f64,
    #[serde(rename = "x1")]
    pub x_max: f64,
    #[serde(rename = "y1")]
    pub y_max: f64,
    #[serde(rename = "conf")]
    pub confidence: f64,
    #[serde(default)]
    pub phrase: String,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64, phrase: impl Into<String>) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence,
            phrase: phrase.into(),
        }
    }

    /// Clamped copy, or `None` when nothing of the box is left inside.
    fn clamped(&self, width: u32, height: u32) -> Option<Box2D> {
        let (w, h) = (width as f64, height as f64);
        let b = Box2D {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
            confidence: self.confidence.clamp(0.0, 1.0),
            phrase: self.phrase.clone(),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    /// Whether pixel cell `(x, y)` lies inside the box dilated by `margin`.
    pub fn contains_cell(&self, x: u32, y: u32, margin: f64) -> bool {
        let (x, y) = (x as f64, y as f64);
        x >= (self.x_min - margin).floor()
            && x + 1.0 <= (self.x_max + margin).ceil()
            && y >= (self.y_min - margin).floor()
            && y + 1.0 <= (self.y_max + margin).ceil()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub query: String,
    pub boxes: Vec<Box2D>,
}

impl DetectionSet {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn max_confidence(&self) -> f64 {
        self.boxes.iter().map(|b| b.confidence).fold(0.0, f64::max)
    }

    /// Boxes at or above `threshold`, order kept.
    pub fn above(&self, threshold: f64) -> DetectionSet {
        DetectionSet {
            query: self.query.clone(),
            boxes: self.boxes.iter().filter(|b| b.confidence >= threshold).cloned().collect(),
        }
    }
}

/// Raw backend surface. Implementations do not need to clamp or sort.
pub trait VisionBackend: Send + Sync {
    fn name(&self) -> String;
    fn detect(&self, text: &str, image: &ImageRef) -> Result<Vec<Box2D>, BackendError>;
    fn segment(&self, boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError>;
}

impl<T: VisionBackend + ?Sized> VisionBackend for std::sync::Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn detect(&self, text: &str, image: &ImageRef) -> Result<Vec<Box2D>, BackendError> {
        (**self).detect(text, image)
    }
    fn segment(&self, boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError> {
        (**self).segment(boxes, image)
    }
}

/// Text-prompted detection: boxes clamped to the image and sorted by
/// confidence, highest first.
pub fn detect(text: &str, image: &ImageRef, backend: &dyn VisionBackend) -> Result<DetectionSet, BackendError> {
    image.validate()?;
    let raw = backend.detect(text, image)?;
    let mut boxes = Vec::with_capacity(raw.len());
    for b in &raw {
        let coords = [b.x_min, b.y_min, b.x_max, b.y_max, b.confidence];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::protocol(
                "non-finite box coordinate or confidence",
                serde_json::to_string(&raw).unwrap_or_default(),
            ));
        }
        if let Some(c) = b.clamped(image.width, image.height) {
            boxes.push(c);
        }
    }
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(DetectionSet {
        query: text.to_owned(),
        boxes,
    })
}

/// Box-prompted segmentation. Mask `k` belongs to box `k` and gets
/// instance id `k`; cells outside the dilated box are cleared.
pub fn segment(
    detections: &DetectionSet,
    image: &ImageRef,
    backend: &dyn VisionBackend,
    margin: f64,
) -> Result<Vec<Mask2D>, BackendError> {
    if detections.boxes.is_empty() {
        return Ok(Vec::new());
    }
    image.validate()?;
    let raw = backend.segment(&detections.boxes, image)?;
    let payload = || serde_json::to_string(&raw).unwrap_or_default();
    if raw.len() != detections.boxes.len() {
        return Err(BackendError::protocol(
            format!("{} masks for {} boxes", raw.len(), detections.boxes.len()),
            payload(),
        ));
    }
    let mut slots: Vec<Option<Mask2D>> = vec![None; raw.len()];
    for m in &raw {
        if m.width != image.width || m.height != image.height {
            return Err(BackendError::protocol(
                format!("mask is {}x{} but image is {}x{}", m.width, m.height, image.width, image.height),
                payload(),
            ));
        }
        let slot = slots
            .get_mut(m.box_index)
            .ok_or_else(|| BackendError::protocol(format!("box_index {} out of range", m.box_index), payload()))?;
        if slot.is_some() {
            return Err(BackendError::protocol(format!("duplicate box_index {}", m.box_index), payload()));
        }
        let mut mask = m.decode().map_err(|e| BackendError::protocol(e.to_string(), payload()))?;
        let b = &detections.boxes[m.box_index];
        let cleared = mask.clear_where(|x, y| !b.contains_cell(x, y, margin));
        if cleared > 0 {
            tracing::warn!(box_index = m.box_index, cleared, "mask cells outside dilated box removed");
        }
        mask.instance_id = m.box_index as u32;
        mask.source_box = Some(m.box_index);
        *slot = Some(mask);
    }
    Ok(slots.into_iter().map(|m| m.expect("every slot filled")).collect())
}
