//! Per-class point IoU against ground truth, restricted to the camera's
//! field of view and aggregated over frames by summing counts.

pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{fov_filter, AnnotationRecord, DatasetError, SequenceManifest};
use crate::exec::Exec;

pub use report::{render_table, semantic_kitti_name};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("data error: {0}")]
    Data(String),
}

/// Open-vocabulary class text → ground-truth class id.
pub type ClassMap = BTreeMap<String, u16>;

pub fn load_class_map(path: &Path) -> Result<ClassMap, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassConfusion {
    pub class_id: u16,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassConfusion {
    pub fn iou(&self) -> Option<f64> {
        iou(self.tp, self.fp, self.fn_)
    }
}

/// TP / (TP + FP + FN), or `None` when the class never occurs.
pub fn iou(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let denom = tp + fp + fn_;
    (denom > 0).then(|| tp as f64 / denom as f64)
}

/// Counts over the points listed in `mask`. A `None` prediction is its
/// own class and never matches ground truth. Output is sorted by class id
/// and covers every class seen in either input at a masked point.
pub fn confusion(pred: &[Option<u16>], gt: &[u16], mask: &[usize]) -> Result<Vec<ClassConfusion>, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Data(format!("{} predictions / {} labels", pred.len(), gt.len())));
    }
    let mut counts: BTreeMap<u16, ClassConfusion> = BTreeMap::new();
    fn entry(counts: &mut BTreeMap<u16, ClassConfusion>, c: u16) -> &mut ClassConfusion {
        counts.entry(c).or_insert(ClassConfusion { class_id: c, ..Default::default() })
    }
    for &i in mask {
        let (p, g) = match (pred.get(i), gt.get(i)) {
            (Some(p), Some(g)) => (*p, *g),
            _ => return Err(EvalError::Data(format!("mask index {i} out of range for {} points", gt.len()))),
        };
        match p {
            Some(p) if p == g => entry(&mut counts, g).tp += 1,
            Some(p) => {
                entry(&mut counts, p).fp += 1;
                entry(&mut counts, g).fn_ += 1;
            }
            None => entry(&mut counts, g).fn_ += 1,
        }
    }
    Ok(counts.into_values().collect())
}

/// Adds `b` into `a`; both sorted by class id.
pub fn merge_confusions(a: Vec<ClassConfusion>, b: Vec<ClassConfusion>) -> Vec<ClassConfusion> {
    let mut map: BTreeMap<u16, ClassConfusion> = a.into_iter().map(|c| (c.class_id, c)).collect();
    for c in b {
        let e = map.entry(c.class_id).or_insert(ClassConfusion { class_id: c.class_id, ..Default::default() });
        e.tp += c.tp;
        e.fp += c.fp;
        e.fn_ += c.fn_;
    }
    map.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Count only points inside the camera image.
    pub fov_filter: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fov_filter: true,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: u16,
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: Option<f64>,
    /// Class texts mapped onto this id.
    pub texts: Vec<String>,
}

/// Milliseconds summed over frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_ms: f64,
    pub fov_ms: f64,
    pub count_ms: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigSnapshot {
    pub camera_id: String,
    pub fov_filter: bool,
    pub class_map: ClassMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub points_counted: u64,
    pub classes: Vec<ClassResult>,
    /// Mean over mapped classes that have an IoU.
    pub mean_iou: Option<f64>,
    /// Class texts without a mapping; their records were not counted.
    pub unevaluated: Vec<String>,
    pub timings: StageTimings,
    pub config: EvalConfigSnapshot,
}

impl EvalReport {
    pub fn class(&self, class_id: u16) -> Option<&ClassResult> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

struct FrameCounts {
    confusions: Vec<ClassConfusion>,
    points: u64,
    timings: StageTimings,
}

fn evaluate_frame(
    manifest: &SequenceManifest,
    frame_id: u32,
    records: &[&AnnotationRecord],
    class_map: &ClassMap,
    options: &EvalOptions,
) -> Result<FrameCounts, EvalError> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let frame = manifest.load_frame(frame_id)?;
    timings.load_ms = t.elapsed().as_secs_f64() * 1e3;
    let gt = frame
        .labels
        .ok_or_else(|| EvalError::Data(format!("frame {frame_id} has no ground-truth labels")))?;

    let t = Instant::now();
    let mask: Vec<usize> = if options.fov_filter {
        fov_filter(&frame.cloud, &manifest.camera).1
    } else {
        (0..frame.cloud.len()).collect()
    };
    timings.fov_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let mut pred = vec![None; frame.cloud.len()];
    // Later records overwrite earlier ones on shared points.
    for r in records {
        let Some(&class_id) = class_map.get(&r.class_text) else {
            continue;
        };
        r.validate_indices(frame.cloud.len())?;
        for &i in &r.point_indices {
            pred[i] = Some(class_id);
        }
    }
    let confusions = confusion(&pred, &gt.class_ids, &mask)?;
    timings.count_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(FrameCounts {
        confusions,
        points: mask.len() as u64,
        timings,
    })
}

/// Evaluates `annotations` on `frames` of the sequence.
pub fn run_evaluation(
    manifest: &SequenceManifest,
    annotations: &[AnnotationRecord],
    frames: &[u32],
    class_map: &ClassMap,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let wall = Instant::now();
    for &f in frames {
        if !manifest.contains(f) {
            return Err(DatasetError::UnknownFrame(f).into());
        }
    }
    let mut by_frame: BTreeMap<u32, Vec<&AnnotationRecord>> = BTreeMap::new();
    let mut unevaluated = BTreeSet::new();
    for r in annotations {
        if !class_map.contains_key(&r.class_text) {
            unevaluated.insert(r.class_text.clone());
        }
        by_frame.entry(r.frame_id).or_default().push(r);
    }

    let per_frame = options.exec.map(frames, |&f| {
        let records = by_frame.get(&f).map(Vec::as_slice).unwrap_or(&[]);
        evaluate_frame(manifest, f, records, class_map, options)
    });

    let mut totals: Vec<ClassConfusion> = Vec::new();
    let mut timings = StageTimings::default();
    let mut points = 0;
    for result in per_frame {
        let fc = result?;
        totals = merge_confusions(totals, fc.confusions);
        points += fc.points;
        timings.load_ms += fc.timings.load_ms;
        timings.fov_ms += fc.timings.fov_ms;
        timings.count_ms += fc.timings.count_ms;
    }
    let mapped: BTreeSet<u16> = class_map.values().copied().collect();
    for &id in &mapped {
        if !totals.iter().any(|c| c.class_id == id) {
            totals = merge_confusions(totals, vec![ClassConfusion { class_id: id, ..Default::default() }]);
        }
    }

    let classes: Vec<ClassResult> = totals
        .iter()
        .map(|c| ClassResult {
            class_id: c.class_id,
            name: semantic_kitti_name(c.class_id).to_owned(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            iou: c.iou(),
            texts: class_map.iter().filter(|(_, &v)| v == c.class_id).map(|(k, _)| k.clone()).collect(),
        })
        .collect();
    let mapped_ious: Vec<f64> = classes
        .iter()
        .filter(|c| mapped.contains(&c.class_id))
        .filter_map(|c| c.iou)
        .collect();
    let mean_iou = (!mapped_ious.is_empty()).then(|| mapped_ious.iter().sum::<f64>() / mapped_ious.len() as f64);
    timings.wall_ms = wall.elapsed().as_secs_f64() * 1e3;

    Ok(EvalReport {
        frames: frames.len(),
        points_counted: points,
        classes,
        mean_iou,
        unevaluated: unevaluated.into_iter().collect(),
        timings,
        config: EvalConfigSnapshot {
            camera_id: manifest.camera_id.clone(),
            fov_filter: options.fov_filter,
            class_map: class_map.clone(),
        },
    })
}
