//! Scripted vision backend driven by a JSON scenario file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Box2D, ImageRef, VisionBackend};
use crate::backend::BackendError;
use crate::mask::{Mask2D, RleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each mask is its box rasterized to whole pixel cells.
    #[default]
    FillBox,
    /// Masks are taken from the entry's `masks` list.
    ExplicitRle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionScenarioEntry {
    /// Case-insensitive substring the detection text must contain.
    pub match_text_substring: String,
    /// `None` matches any frame.
    #[serde(default)]
    pub frame_id: Option<u32>,
    #[serde(default)]
    pub boxes: Vec<Box2D>,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub masks: Vec<RleMask>,
}

impl VisionScenarioEntry {
    fn matches(&self, text: &str, frame_id: u32) -> bool {
        self.frame_id.is_none_or(|f| f == frame_id)
            && text.to_lowercase().contains(&self.match_text_substring.to_lowercase())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockVision {
    pub entries: Vec<VisionScenarioEntry>,
}

impl MockVision {
    pub fn new(entries: Vec<VisionScenarioEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let entries = serde_json::from_str(text).map_err(|e| BackendError::protocol(e.to_string(), text))?;
        Ok(Self { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Boxes reach `segment` clamped and re-sorted, so explicit masks are
    /// looked up by frame and box phrases rather than coordinates.
    fn entry_for(&self, boxes: &[Box2D], frame_id: u32) -> Option<&VisionScenarioEntry> {
        self.entries.iter().find(|e| {
            e.frame_id.is_none_or(|f| f == frame_id)
                && e.mask_mode == MaskMode::ExplicitRle
                && e.masks.len() == boxes.len()
                && e.boxes.len() == boxes.len()
                && e.boxes.iter().zip(boxes).all(|(a, b)| a.phrase == b.phrase)
        })
    }
}

/// One fill-box mask per box, cells `[floor(x0), ceil(x1)) x [floor(y0), ceil(y1))`.
pub fn fill_boxes(boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError> {
    Ok(boxes
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let mut m = Mask2D::empty(image.width, image.height);
            let x0 = b.x_min.floor().max(0.0) as u32;
            let y0 = b.y_min.floor().max(0.0) as u32;
            let x1 = (b.x_max.ceil().max(0.0) as u32).min(image.width);
            let y1 = (b.y_max.ceil().max(0.0) as u32).min(image.height);
            m.fill_rect(x0, y0, x1, y1);
            let mut rle = RleMask::from_mask(&m);
            rle.box_index = k;
            rle
        })
        .collect())
}

impl VisionBackend for MockVision {
    fn name(&self) -> String {
        "mock-vision".into()
    }

    fn detect(&self, text: &str, image: &ImageRef) -> Result<Vec<Box2D>, BackendError> {
        Ok(self
            .entries
            .iter()
            .find(|e| e.matches(text, image.frame_id))
            .map(|e| e.boxes.clone())
            .unwrap_or_default())
    }

    fn segment(&self, boxes: &[Box2D], image: &ImageRef) -> Result<Vec<RleMask>, BackendError> {
        match self.entry_for(boxes, image.frame_id) {
            Some(e) => Ok(e.masks.clone()),
            None => fill_boxes(boxes, image),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = r#"[
        {"match_text_substring": "balloon", "frame_id": 1,
         "boxes": [{"x0": 1, "y0": 1, "x1": 3, "y1": 2, "conf": 0.9, "phrase": "balloon"}]},
        {"match_text_substring": "balloon",
         "boxes": [{"x0": 0.5, "y0": 0.5, "x1": 2.2, "y1": 1.0, "conf": 0.6, "phrase": "balloon"}]}
    ]"#;

    #[test]
    fn first_matching_entry() {
        let mock = MockVision::from_json(SCENARIO).unwrap();
        let f1 = ImageRef::new(1, 4, 4, vec![], "image/png");
        let f2 = ImageRef::new(2, 4, 4, vec![], "image/png");
        assert_eq!(mock.detect("Red BALLOON", &f1).unwrap()[0].confidence, 0.9);
        assert_eq!(mock.detect("balloon", &f2).unwrap()[0].confidence, 0.6);
        assert!(mock.detect("car", &f1).unwrap().is_empty());
    }

    #[test]
    fn fill_box_rasterizes_cells() {
        let mock = MockVision::from_json(SCENARIO).unwrap();
        let img = ImageRef::new(2, 4, 4, vec![], "image/png");
        let boxes = mock.detect("balloon", &img).unwrap();
        let m = mock.segment(&boxes, &img).unwrap()[0].decode().unwrap();
        // [0, 3) x [0, 1)
        assert_eq!(m.iter_set().collect::<Vec<_>>(), vec![(0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn bad_scenario_is_protocol_error() {
        assert!(matches!(MockVision::from_json("{"), Err(BackendError::Protocol { .. })));
    }
}
