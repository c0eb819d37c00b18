//! Turning per-frame 2D masks into 3D instance labels.
//!
//! The path for one mask is: project the frame cloud, keep the points whose
//! pixel cell is set, split them into Euclidean components, keep the
//! dominant component (background caught inside the mask forms its own,
//! smaller components), and fit an oriented box to what remains.

pub mod boxfit;
pub mod cluster;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{points_in_mask, project_points, CalibratedCamera, GeometryError, PointCloud, ProjectedCloud};
use crate::mask::Mask2D;

pub use boxfit::{fit_box, fit_points, BoxFit, OrientedBox3D, EXTENT_FLOOR};
pub use cluster::{cluster, ClusterParams, Clustering};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLabel3D {
    pub instance_id: u32,
    pub class_text: String,
    /// Sorted, unique indices into the frame cloud.
    pub point_indices: Vec<usize>,
    pub bbox: OrientedBox3D,
    pub confidence: f64,
    #[serde(default)]
    pub degenerate: bool,
}

/// Indices of cloud points that project into a set cell of `mask`.
pub fn lift_mask(cloud: &PointCloud, cam: &CalibratedCamera, mask: &Mask2D) -> Result<Vec<usize>, GeometryError> {
    let projected = project_points(cloud, cam);
    points_in_mask(&projected, mask)
}

/// Builds one label from a mask over an already projected frame. Returns
/// `None` when no component survives `params.min_points`.
pub fn label_from_mask(
    cloud: &PointCloud,
    projected: &ProjectedCloud,
    mask: &Mask2D,
    class_text: &str,
    confidence: f64,
    params: &ClusterParams,
) -> Result<Option<InstanceLabel3D>, GeometryError> {
    let inside = points_in_mask(projected, mask)?;
    let clustering = cluster(&inside, cloud, params);
    let members: Vec<usize> = if params.keep_all {
        let mut all: Vec<usize> = clustering.clusters.concat();
        all.sort_unstable();
        all
    } else {
        match clustering.largest() {
            Some(c) => c.clone(),
            None => return Ok(None),
        }
    };
    if members.is_empty() {
        return Ok(None);
    }
    let fit = fit_box(&members, cloud);
    Ok(Some(InstanceLabel3D {
        instance_id: mask.instance_id,
        class_text: class_text.to_owned(),
        point_indices: members,
        bbox: fit.bbox,
        confidence,
        degenerate: fit.degenerate,
    }))
}

/// Gives every contested point to the most confident label (ties: lower
/// instance id), refits boxes whose membership changed and drops labels
/// left empty. Output keeps input order.
pub fn resolve_overlaps(labels: Vec<InstanceLabel3D>, cloud: &PointCloud) -> Vec<InstanceLabel3D> {
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (slot, label) in labels.iter().enumerate() {
        for &idx in &label.point_indices {
            owner
                .entry(idx)
                .and_modify(|cur| {
                    let incumbent = &labels[*cur];
                    let wins = match label.confidence.total_cmp(&incumbent.confidence) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => label.instance_id < incumbent.instance_id,
                    };
                    if wins {
                        *cur = slot;
                    }
                })
                .or_insert(slot);
        }
    }
    labels
        .into_iter()
        .enumerate()
        .filter_map(|(slot, mut label)| {
            let kept: Vec<usize> = label
                .point_indices
                .iter()
                .copied()
                .filter(|idx| owner[idx] == slot)
                .collect();
            if kept.is_empty() {
                return None;
            }
            if kept.len() != label.point_indices.len() {
                let fit = fit_box(&kept, cloud);
                label.bbox = fit.bbox;
                label.degenerate = fit.degenerate;
                label.point_indices = kept;
            }
            Some(label)
        })
        .collect()
}
