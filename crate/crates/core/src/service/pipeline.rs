//! Per-frame detect → segment → lift, and the multi-frame passes that
//! turn per-frame labels into candidate annotations.

use std::collections::BTreeMap;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::ServiceError;
use crate::dataset::SequenceManifest;
use crate::exec::Exec;
use crate::geometry::{project_points_with, CalibratedCamera, GeometryError, PointCloud};
use crate::lift::boxfit::wrap_angle;
use crate::lift::{label_from_mask, resolve_overlaps, ClusterParams, InstanceLabel3D, OrientedBox3D};
use crate::mask::{Mask2D, RleMask};
use crate::temporal::{associate, fuse_and_correct, interpolate_keyframes, EntrySource, Track, TrackEntry};
use crate::vision::{self, DetectionSet, ImageRef, VisionBackend};

/// One label of a candidate annotation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLabel {
    pub frame_id: u32,
    pub instance_id: u32,
    pub class_text: String,
    pub point_indices: Vec<usize>,
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub confidence: f64,
    pub source: EntrySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: u32,
    pub detections: DetectionSet,
    pub masks: Vec<RleMask>,
    pub labels: Vec<InstanceLabel3D>,
}

pub fn image_for(manifest: &SequenceManifest, frame_id: u32) -> Result<ImageRef, ServiceError> {
    let content = match manifest.image_path(frame_id) {
        Some(p) => std::fs::read(&p).map_err(|e| ServiceError::Data(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    Ok(ImageRef::new(
        frame_id,
        manifest.camera.width(),
        manifest.camera.height(),
        content,
        "image/png",
    ))
}

/// The geometry path for one frame: project once, lift every mask,
/// cluster, fit boxes and settle contested points. No backend calls.
pub fn lift_frame(
    cloud: &PointCloud,
    camera: &CalibratedCamera,
    masks: &[Mask2D],
    confidences: &[f64],
    class_text: &str,
    params: &ClusterParams,
    exec: Exec,
) -> Result<Vec<InstanceLabel3D>, GeometryError> {
    let projected = project_points_with(cloud, camera, exec);
    let jobs: Vec<(&Mask2D, f64)> = masks.iter().zip(confidences.iter().copied()).collect();
    let lifted = exec.map(&jobs, |(mask, conf)| label_from_mask(cloud, &projected, mask, class_text, *conf, params));
    let mut labels = Vec::with_capacity(lifted.len());
    for l in lifted {
        labels.extend(l?);
    }
    Ok(resolve_overlaps(labels, cloud))
}

/// Detects (unless detections are supplied), segments and lifts one frame.
#[allow(clippy::too_many_arguments)]
pub fn process_frame(
    manifest: &SequenceManifest,
    cloud: &PointCloud,
    frame_id: u32,
    text: &str,
    class_text: &str,
    detections: Option<DetectionSet>,
    vision_backend: &dyn VisionBackend,
    config: &PipelineConfig,
) -> Result<FrameResult, ServiceError> {
    let image = image_for(manifest, frame_id)?;
    let retry = &config.interpreter.retry;
    let detections = match detections {
        Some(d) => d,
        None => retry
            .run(|| vision::detect(text, &image, vision_backend))?
            .above(config.interpreter.match_threshold),
    };
    let masks = retry.run(|| vision::segment(&detections, &image, vision_backend, config.mask_margin))?;
    let confidences: Vec<f64> = masks
        .iter()
        .map(|m| m.source_box.map(|k| detections.boxes[k].confidence).unwrap_or(0.0))
        .collect();
    let labels = lift_frame(cloud, &manifest.camera, &masks, &confidences, class_text, &config.cluster, config.exec)?;
    Ok(FrameResult {
        frame_id,
        masks: masks.iter().map(RleMask::from_mask).collect(),
        detections,
        labels,
    })
}

/// Applies a rigid pose to a box. Only the yaw part of the rotation is
/// carried into the box orientation.
pub fn transform_box(b: &OrientedBox3D, m: &Matrix4<f64>) -> OrientedBox3D {
    let c = m.transform_point(&nalgebra::Point3::new(b.cx, b.cy, b.cz));
    OrientedBox3D {
        cx: c.x,
        cy: c.y,
        cz: c.z,
        yaw: wrap_angle(b.yaw + m[(1, 0)].atan2(m[(0, 0)])),
        ..*b
    }
}

/// Frame clouds in a common frame (world when poses exist) plus the
/// transforms needed to move boxes in and out of it.
pub struct CommonFrame {
    pub clouds: BTreeMap<u32, PointCloud>,
    to_common: BTreeMap<u32, Matrix4<f64>>,
}

impl CommonFrame {
    pub fn new(manifest: &SequenceManifest, sensor_clouds: &BTreeMap<u32, PointCloud>) -> Self {
        let mut clouds = BTreeMap::new();
        let mut to_common = BTreeMap::new();
        for (&f, cloud) in sensor_clouds {
            match manifest.pose(f) {
                Some(pose) => {
                    clouds.insert(f, cloud.to_world(pose));
                    to_common.insert(f, *pose);
                }
                None => {
                    clouds.insert(f, cloud.clone());
                }
            }
        }
        Self { clouds, to_common }
    }

    fn into_common(&self, f: u32, b: &OrientedBox3D) -> OrientedBox3D {
        match self.to_common.get(&f) {
            Some(m) => transform_box(b, m),
            None => *b,
        }
    }

    fn into_sensor(&self, f: u32, b: &OrientedBox3D) -> OrientedBox3D {
        match self.to_common.get(&f).and_then(|m| m.try_inverse()) {
            Some(inv) => transform_box(b, &inv),
            None => *b,
        }
    }

    fn label_into_common(&self, f: u32, l: &InstanceLabel3D) -> InstanceLabel3D {
        InstanceLabel3D {
            bbox: self.into_common(f, &l.bbox),
            ..l.clone()
        }
    }

    /// Candidate labels from tracks. Detected entries keep the original
    /// sensor-frame box; synthesized ones are mapped back.
    fn tracks_to_candidates(&self, tracks: &[Track], originals: &[FrameResult]) -> Vec<CandidateLabel> {
        let mut out = Vec::new();
        for t in tracks {
            for e in &t.entries {
                let bbox = match e.source {
                    EntrySource::Detected => originals
                        .iter()
                        .find(|r| r.frame_id == e.frame_id)
                        .and_then(|r| r.labels.iter().find(|l| l.instance_id == e.instance_id))
                        .map(|l| l.bbox)
                        .unwrap_or_else(|| self.into_sensor(e.frame_id, &e.bbox)),
                    _ => self.into_sensor(e.frame_id, &e.bbox),
                };
                out.push(CandidateLabel {
                    frame_id: e.frame_id,
                    instance_id: t.track_id,
                    class_text: t.class_text.clone(),
                    point_indices: e.point_indices.clone(),
                    bbox,
                    confidence: e.confidence,
                    source: e.source,
                });
            }
        }
        out.sort_by_key(|c| (c.frame_id, c.instance_id));
        out
    }
}

/// Associates per-frame labels into tracks and corrects each track.
pub fn fuse_frames(
    results: &[FrameResult],
    common: &CommonFrame,
    config: &PipelineConfig,
) -> Result<Vec<CandidateLabel>, ServiceError> {
    let by_frame: Vec<(u32, Vec<InstanceLabel3D>)> = results
        .iter()
        .map(|r| (r.frame_id, r.labels.iter().map(|l| common.label_into_common(r.frame_id, l)).collect()))
        .collect();
    let tracks = associate(&by_frame, &config.association);
    let corrected = config
        .exec
        .map(&tracks, |t| fuse_and_correct(t, &config.kinematic, &common.clouds));
    let tracks = corrected.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(common.tracks_to_candidates(&tracks, results))
}

/// Pairs endpoint labels by class (nearest centers first, no gate) and
/// interpolates each pair across the range. Unpaired labels are kept as
/// single detected entries.
pub fn interpolate_frames(
    start: &FrameResult,
    end: &FrameResult,
    common: &CommonFrame,
) -> Result<Vec<CandidateLabel>, ServiceError> {
    let a: Vec<InstanceLabel3D> = start.labels.iter().map(|l| common.label_into_common(start.frame_id, l)).collect();
    let b: Vec<InstanceLabel3D> = end.labels.iter().map(|l| common.label_into_common(end.frame_id, l)).collect();
    let mut pairs: Vec<(f64, u32, u32, usize, usize)> = Vec::new();
    for (i, la) in a.iter().enumerate() {
        for (j, lb) in b.iter().enumerate() {
            if la.class_text == lb.class_text {
                let d = la.bbox.center().distance_squared(&lb.bbox.center());
                pairs.push((d, la.instance_id, lb.instance_id, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut tracks = Vec::new();
    for (_, _, _, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let mut t = interpolate_keyframes(&a[i], start.frame_id, &b[j], end.frame_id, &common.clouds)?;
        t.track_id = tracks.len() as u32;
        tracks.push(t);
    }
    for (frame_id, labels, used) in [(start.frame_id, &a, &used_a), (end.frame_id, &b, &used_b)] {
        for (l, _) in labels.iter().zip(used.iter()).filter(|(_, u)| !**u) {
            tracks.push(Track {
                track_id: tracks.len() as u32,
                class_text: l.class_text.clone(),
                entries: vec![TrackEntry::detected(frame_id, l)],
                skipped: false,
            });
        }
    }
    Ok(common.tracks_to_candidates(&tracks, &[start.clone(), end.clone()]))
}

/// Per-frame labels as candidates, without any temporal pass.
pub fn single_frame_candidates(r: &FrameResult) -> Vec<CandidateLabel> {
    r.labels
        .iter()
        .map(|l| CandidateLabel {
            frame_id: r.frame_id,
            instance_id: l.instance_id,
            class_text: l.class_text.clone(),
            point_indices: l.point_indices.clone(),
            bbox: l.bbox,
            confidence: l.confidence,
            source: EntrySource::Detected,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_round_trip_through_pose() {
        let yaw: f64 = 0.4;
        let mut m = Matrix4::identity();
        m[(0, 0)] = yaw.cos();
        m[(0, 1)] = -yaw.sin();
        m[(1, 0)] = yaw.sin();
        m[(1, 1)] = yaw.cos();
        m[(0, 3)] = 5.0;
        m[(2, 3)] = -1.0;
        let b = OrientedBox3D { cx: 1.0, cy: 2.0, cz: 0.5, dx: 4.0, dy: 2.0, dz: 1.5, yaw: 0.1 };
        let w = transform_box(&b, &m);
        assert!((w.yaw - 0.5).abs() < 1e-12);
        let back = transform_box(&w, &m.try_inverse().unwrap());
        for (x, y) in [(back.cx, b.cx), (back.cy, b.cy), (back.cz, b.cz), (back.yaw, b.yaw)] {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
