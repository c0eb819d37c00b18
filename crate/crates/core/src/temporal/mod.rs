//! Multi-frame passes over per-frame instance labels: keyframe
//! interpolation, track association, and trajectory-based correction.

pub mod associate;
pub mod correct;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;
use crate::lift::boxfit::wrap_angle;
use crate::lift::{InstanceLabel3D, OrientedBox3D};

pub use associate::{associate, AssociationParams};
pub use correct::{fuse_and_correct, KinematicModel, MotionModel};

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Detected,
    Interpolated,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame_id: u32,
    pub bbox: OrientedBox3D,
    pub source: EntrySource,
    pub confidence: f64,
    /// Sorted indices into the frame cloud.
    pub point_indices: Vec<usize>,
    /// Instance id within the frame the entry came from; synthesized
    /// entries inherit the track's first instance id.
    pub instance_id: u32,
}

impl TrackEntry {
    pub fn detected(frame_id: u32, label: &InstanceLabel3D) -> Self {
        Self {
            frame_id,
            bbox: label.bbox,
            source: EntrySource::Detected,
            confidence: label.confidence,
            point_indices: label.point_indices.clone(),
            instance_id: label.instance_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u32,
    pub class_text: String,
    /// Strictly increasing frame ids.
    pub entries: Vec<TrackEntry>,
    /// Set when correction had too few detected entries to run.
    #[serde(default)]
    pub skipped: bool,
}

impl Track {
    pub fn frame_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }

    pub fn entry(&self, frame_id: u32) -> Option<&TrackEntry> {
        self.entries
            .binary_search_by_key(&frame_id, |e| e.frame_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn detected_count(&self) -> usize {
        self.entries.iter().filter(|e| e.source == EntrySource::Detected).count()
    }
}

pub(crate) fn members_in(clouds: &BTreeMap<u32, PointCloud>, frame_id: u32, bbox: &OrientedBox3D) -> Vec<usize> {
    clouds.get(&frame_id).map(|c| bbox.members(c)).unwrap_or_default()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Box between `a` and `b` at fraction `t`; yaw follows the shorter arc.
pub fn interpolate_box(a: &OrientedBox3D, b: &OrientedBox3D, t: f64) -> OrientedBox3D {
    let sweep = wrap_angle(b.yaw - a.yaw);
    OrientedBox3D {
        cx: lerp(a.cx, b.cx, t),
        cy: lerp(a.cy, b.cy, t),
        cz: lerp(a.cz, b.cz, t),
        dx: lerp(a.dx, b.dx, t),
        dy: lerp(a.dy, b.dy, t),
        dz: lerp(a.dz, b.dz, t),
        yaw: wrap_angle(a.yaw + sweep * t),
    }
}

/// Fills frames `a..=b` between two labels of the same object. Endpoints
/// are copied unchanged; intermediate memberships come from the boxes.
pub fn interpolate_keyframes(
    start: &InstanceLabel3D,
    a: u32,
    end: &InstanceLabel3D,
    b: u32,
    clouds: &BTreeMap<u32, PointCloud>,
) -> Result<Track, TemporalError> {
    if a >= b {
        return Err(TemporalError::InvalidArgument(format!("keyframes {a} and {b} are not increasing")));
    }
    let span = (b - a) as f64;
    let mut entries = Vec::with_capacity((b - a + 1) as usize);
    entries.push(TrackEntry::detected(a, start));
    for f in a + 1..b {
        let t = (f - a) as f64 / span;
        let bbox = interpolate_box(&start.bbox, &end.bbox, t);
        entries.push(TrackEntry {
            frame_id: f,
            bbox,
            source: EntrySource::Interpolated,
            confidence: lerp(start.confidence, end.confidence, t),
            point_indices: members_in(clouds, f, &bbox),
            instance_id: start.instance_id,
        });
    }
    entries.push(TrackEntry::detected(b, end));
    Ok(Track {
        track_id: 0,
        class_text: start.class_text.clone(),
        entries,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn label(c: [f64; 3], yaw: f64) -> InstanceLabel3D {
        InstanceLabel3D {
            instance_id: 0,
            class_text: "car".into(),
            point_indices: vec![],
            bbox: OrientedBox3D { cx: c[0], cy: c[1], cz: c[2], dx: 4.0, dy: 2.0, dz: 1.5, yaw },
            confidence: 0.9,
            degenerate: false,
        }
    }

    #[test]
    fn linear_centers() {
        let t = interpolate_keyframes(&label([0.0; 3], 0.0), 0, &label([10.0, 0.0, 0.0], 0.0), 10, &BTreeMap::new())
            .unwrap();
        assert_eq!(t.entries.len(), 11);
        for (k, e) in t.entries.iter().enumerate() {
            assert!((e.bbox.cx - k as f64).abs() < 1e-12);
            let expect = if k == 0 || k == 10 { EntrySource::Detected } else { EntrySource::Interpolated };
            assert_eq!(e.source, expect);
        }
    }

    #[test]
    fn yaw_crosses_pi() {
        let (a, b) = (170f64.to_radians(), (-170f64).to_radians());
        let t = interpolate_keyframes(&label([0.0; 3], a), 0, &label([0.0; 3], b), 4, &BTreeMap::new()).unwrap();
        for e in &t.entries {
            assert!(e.bbox.yaw.abs() >= 170f64.to_radians() - 1e-12, "{}", e.bbox.yaw);
        }
        assert!((t.entries[2].bbox.yaw.abs() - PI).abs() < 1e-12);
    }

    #[test]
    fn constant_and_bad_range() {
        let l = label([1.0, 2.0, 3.0], 0.3);
        let t = interpolate_keyframes(&l, 2, &l, 5, &BTreeMap::new()).unwrap();
        assert!(t.entries.iter().all(|e| e.bbox == l.bbox));
        assert!(interpolate_keyframes(&l, 5, &l, 5, &BTreeMap::new()).is_err());
    }

    #[test]
    fn memberships_from_boxes() {
        use crate::geometry::Point3;
        let mut clouds = BTreeMap::new();
        clouds.insert(1, PointCloud::new(1, vec![Point3::new(5.0, 0.0, 0.0), Point3::new(50.0, 0.0, 0.0)]));
        let t = interpolate_keyframes(&label([0.0; 3], 0.0), 0, &label([10.0, 0.0, 0.0], 0.0), 2, &clouds).unwrap();
        assert_eq!(t.entries[1].point_indices, vec![0]);
    }
}
