//! Trajectory-based outlier detection and correction.
//!
//! Every detected entry is checked against a constant-velocity line fitted
//! to its nearest other inliers. The worst entry above the residual
//! threshold is flagged and the check repeats until none is left. Flagged
//! entries and interior frames without a detection are then rebuilt from
//! the same kind of window fit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{members_in, EntrySource, TemporalError, Track, TrackEntry};
use crate::geometry::PointCloud;
use crate::lift::OrientedBox3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    #[default]
    ConstantVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicModel {
    pub model: MotionModel,
    /// Meters.
    pub residual_threshold: f64,
    /// Entries per fit window, counting the entry being predicted.
    pub min_window: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// Below this fitted speed (m/s) the window median is used instead of the line.
    pub static_speed: f64,
}

impl Default for KinematicModel {
    fn default() -> Self {
        Self {
            model: MotionModel::ConstantVelocity,
            residual_threshold: 0.75,
            min_window: 5,
            frame_interval: 0.1,
            static_speed: 0.1,
        }
    }
}

impl KinematicModel {
    pub fn validate(&self) -> Result<(), TemporalError> {
        if !(self.residual_threshold > 0.0) {
            return Err(TemporalError::InvalidArgument("residual_threshold must be positive".into()));
        }
        if self.min_window < 3 {
            return Err(TemporalError::InvalidArgument("min_window must be at least 3".into()));
        }
        if !(self.frame_interval > 0.0) {
            return Err(TemporalError::InvalidArgument("frame_interval must be positive".into()));
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The `size` entries nearest to `frame` (ties to the earlier frame),
/// excluding `frame` itself.
fn window<'a>(pool: &[&'a TrackEntry], frame: u32, size: usize) -> Vec<&'a TrackEntry> {
    let mut others: Vec<&TrackEntry> = pool.iter().copied().filter(|e| e.frame_id != frame).collect();
    others.sort_by_key(|e| (e.frame_id.abs_diff(frame), e.frame_id));
    others.truncate(size);
    others
}

/// Center predicted at `frame` from `samples`.
fn predict_center(samples: &[&TrackEntry], frame: u32, model: &KinematicModel) -> [f64; 3] {
    let n = samples.len() as f64;
    let t: Vec<f64> = samples
        .iter()
        .map(|e| (e.frame_id as f64 - frame as f64) * model.frame_interval)
        .collect();
    let t_mean = t.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|ti| (ti - t_mean).powi(2)).sum();
    let axes = [
        samples.iter().map(|e| e.bbox.cx).collect::<Vec<_>>(),
        samples.iter().map(|e| e.bbox.cy).collect(),
        samples.iter().map(|e| e.bbox.cz).collect(),
    ];
    let mut intercept = [0.0; 3];
    let mut speed_sq = 0.0;
    for (k, x) in axes.iter().enumerate() {
        let x_mean = x.iter().sum::<f64>() / n;
        let sxt: f64 = t.iter().zip(x).map(|(ti, xi)| (ti - t_mean) * (xi - x_mean)).sum();
        let slope = if stt > 0.0 { sxt / stt } else { 0.0 };
        intercept[k] = x_mean - slope * t_mean;
        speed_sq += slope * slope;
    }
    if speed_sq.sqrt() < model.static_speed {
        return [axes[0].clone(), axes[1].clone(), axes[2].clone()].map(median);
    }
    intercept
}

fn residual(entry: &TrackEntry, predicted: [f64; 3]) -> f64 {
    let b = &entry.bbox;
    ((b.cx - predicted[0]).powi(2) + (b.cy - predicted[1]).powi(2) + (b.cz - predicted[2]).powi(2)).sqrt()
}

/// Frames of detected entries judged inconsistent with the motion model,
/// in the order they were flagged.
///
/// The worst entry above the threshold is removed until none is left.
/// Then the flagged entry that best fits the remaining inliers is put
/// back if it is within the threshold, and removal starts over. This
/// rescues an endpoint whose extrapolated prediction was dragged off by
/// a nearby outlier.
pub fn flag_outliers(track: &Track, model: &KinematicModel) -> Vec<u32> {
    let mut inliers: Vec<&TrackEntry> = track.entries.iter().filter(|e| e.source == EntrySource::Detected).collect();
    let size = model.min_window - 1;
    let mut flagged: Vec<&TrackEntry> = Vec::new();
    let max_rounds = 2 * inliers.len() + 1;
    for _ in 0..max_rounds {
        while inliers.len() >= model.min_window {
            let mut worst: Option<(f64, usize)> = None;
            for (i, e) in inliers.iter().enumerate() {
                let r = residual(e, predict_center(&window(&inliers, e.frame_id, size), e.frame_id, model));
                if worst.is_none_or(|(w, _)| r > w) {
                    worst = Some((r, i));
                }
            }
            match worst {
                Some((r, i)) if r > model.residual_threshold => flagged.push(inliers.remove(i)),
                _ => break,
            }
        }
        if inliers.len() < size {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, e) in flagged.iter().enumerate() {
            let r = residual(e, predict_center(&window(&inliers, e.frame_id, size), e.frame_id, model));
            if r <= model.residual_threshold && best.is_none_or(|(b, _)| r < b) {
                best = Some((r, i));
            }
        }
        let Some((_, i)) = best else { break };
        let back = flagged.remove(i);
        let at = inliers.partition_point(|e| e.frame_id < back.frame_id);
        inliers.insert(at, back);
    }
    flagged.into_iter().map(|e| e.frame_id).collect()
}

/// Box predicted at `frame`: center from the window fit, extents and yaw
/// from the window medians.
fn predict_box(inliers: &[&TrackEntry], frame: u32, model: &KinematicModel) -> (OrientedBox3D, f64) {
    let w = window(inliers, frame, model.min_window - 1);
    let c = predict_center(&w, frame, model);
    let med = |f: fn(&TrackEntry) -> f64| median(w.iter().map(|e| f(e)).collect());
    let bbox = OrientedBox3D {
        cx: c[0],
        cy: c[1],
        cz: c[2],
        dx: med(|e| e.bbox.dx),
        dy: med(|e| e.bbox.dy),
        dz: med(|e| e.bbox.dz),
        yaw: med(|e| e.bbox.yaw),
    };
    (bbox, med(|e| e.confidence))
}

/// Flags outliers and rebuilds them, together with interior frames that
/// have no detected entry. Inlier entries are returned unchanged. Tracks
/// with fewer than `min_window` detected entries come back as they were,
/// with `skipped` set.
pub fn fuse_and_correct(
    track: &Track,
    model: &KinematicModel,
    clouds: &BTreeMap<u32, PointCloud>,
) -> Result<Track, TemporalError> {
    model.validate()?;
    if track.detected_count() < model.min_window {
        let mut out = track.clone();
        out.skipped = true;
        return Ok(out);
    }
    let flagged = flag_outliers(track, model);
    let inliers: Vec<&TrackEntry> = track
        .entries
        .iter()
        .filter(|e| e.source == EntrySource::Detected && !flagged.contains(&e.frame_id))
        .collect();
    let first = track.entries.first().map(|e| e.frame_id).unwrap_or(0);
    let last = track.entries.last().map(|e| e.frame_id).unwrap_or(0);
    let instance_id = track.entries.first().map(|e| e.instance_id).unwrap_or(0);

    let mut entries = Vec::with_capacity((last - first + 1) as usize);
    for f in first..=last {
        if let Some(e) = inliers.iter().find(|e| e.frame_id == f) {
            entries.push((*e).clone());
            continue;
        }
        let (bbox, confidence) = predict_box(&inliers, f, model);
        entries.push(TrackEntry {
            frame_id: f,
            bbox,
            source: EntrySource::Corrected,
            confidence,
            point_indices: members_in(clouds, f, &bbox),
            instance_id,
        });
    }
    Ok(Track {
        track_id: track.track_id,
        class_text: track.class_text.clone(),
        entries,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(f: u32, x: f64, y: f64) -> TrackEntry {
        TrackEntry {
            frame_id: f,
            bbox: OrientedBox3D { cx: x, cy: y, cz: 0.5, dx: 4.0, dy: 2.0, dz: 1.5, yaw: 0.2 },
            source: EntrySource::Detected,
            confidence: 0.9,
            point_indices: vec![f as usize],
            instance_id: 0,
        }
    }

    fn line(frames: impl Iterator<Item = u32>) -> Track {
        Track {
            track_id: 0,
            class_text: "car".into(),
            entries: frames.map(|f| entry(f, 1.0 + 0.8 * f as f64, -2.0 + 0.3 * f as f64)).collect(),
            skipped: false,
        }
    }

    #[test]
    fn perfect_line_untouched() {
        let t = line(0..9);
        let out = fuse_and_correct(&t, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn displaced_frame_corrected() {
        let mut t = line(0..9);
        t.entries[5].bbox.cy += 3.0;
        assert_eq!(flag_outliers(&t, &KinematicModel::default()), vec![5]);
        let out = fuse_and_correct(&t, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        let e = &out.entries[5];
        assert_eq!(e.source, EntrySource::Corrected);
        assert!((e.bbox.cx - 5.0).abs() < 1e-9 && (e.bbox.cy - -0.5).abs() < 1e-9);
        assert_eq!((e.bbox.dx, e.bbox.yaw), (4.0, 0.2));
        for k in (0..9).filter(|&k| k != 5) {
            assert_eq!(out.entries[k], t.entries[k]);
        }
        let again = fuse_and_correct(&out, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn dropped_frame_synthesized() {
        let t = line((0..9).filter(|&f| f != 5));
        let out = fuse_and_correct(&t, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        assert_eq!(out.entries.len(), 9);
        let e = &out.entries[5];
        assert_eq!(e.source, EntrySource::Corrected);
        assert!((e.bbox.cx - 5.0).abs() < 1e-9 && (e.bbox.cy - -0.5).abs() < 1e-9);
    }

    #[test]
    fn static_object_uses_median() {
        let mut t = Track {
            track_id: 0,
            class_text: "cone".into(),
            entries: (0..7).map(|f| entry(f, 3.0 + if f % 2 == 0 { 0.001 } else { -0.001 }, 1.0)).collect(),
            skipped: false,
        };
        t.entries[3].bbox.cx += 2.0;
        let out = fuse_and_correct(&t, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        assert_eq!(out.entries[3].source, EntrySource::Corrected);
        assert!((out.entries[3].bbox.cx - 3.0).abs() < 0.002);
    }

    #[test]
    fn short_track_skipped() {
        let t = line(0..4);
        let out = fuse_and_correct(&t, &KinematicModel::default(), &BTreeMap::new()).unwrap();
        assert!(out.skipped);
        assert_eq!(out.entries, t.entries);
    }

    #[test]
    fn bad_model() {
        let m = KinematicModel { min_window: 2, ..Default::default() };
        assert!(fuse_and_correct(&line(0..9), &m, &BTreeMap::new()).is_err());
    }
}
