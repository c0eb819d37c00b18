//! Euclidean connected components over a voxel hash grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid cluster parameters: {0}")]
pub struct ClusterParamsError(String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    /// Two points closer than or equal to this are neighbors, in meters.
    pub neighbor_radius: f64,
    pub min_points: usize,
    /// Keep every surviving component instead of only the largest.
    pub keep_all: bool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            neighbor_radius: 0.5,
            min_points: 5,
            keep_all: false,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterParamsError> {
        if !(self.neighbor_radius > 0.0 && self.neighbor_radius.is_finite()) {
            return Err(ClusterParamsError(format!(
                "neighbor_radius must be positive, got {}",
                self.neighbor_radius
            )));
        }
        if self.min_points < 1 {
            return Err(ClusterParamsError("min_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Clustering {
    /// Components with at least `min_points` members. Each is sorted
    /// ascending; components are ordered by their smallest index.
    pub clusters: Vec<Vec<usize>>,
    /// Components rejected for being too small, same ordering.
    pub discarded: Vec<Vec<usize>>,
}

impl Clustering {
    /// Largest component; ties go to the one with the smallest index.
    pub fn largest(&self) -> Option<&Vec<usize>> {
        self.clusters
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(_, c)| c)
    }
}

type Cell = (i64, i64, i64);

/// Partitions `indices` into ε-connected components.
pub fn cluster(indices: &[usize], cloud: &PointCloud, params: &ClusterParams) -> Clustering {
    let eps = params.neighbor_radius;
    let eps2 = eps * eps;
    let mut ids = indices.to_vec();
    ids.sort_unstable();
    ids.dedup();

    let cell_of = |i: usize| -> Cell {
        let p = &cloud.points[i];
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    };
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::with_capacity(ids.len());
    for (slot, &i) in ids.iter().enumerate() {
        grid.entry(cell_of(i)).or_default().push(slot);
    }

    let mut component = vec![usize::MAX; ids.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..ids.len() {
        if component[seed] != usize::MAX {
            continue;
        }
        let label = components.len();
        component[seed] = label;
        let mut members = vec![ids[seed]];
        stack.push(seed);
        while let Some(slot) = stack.pop() {
            let p = cloud.points[ids[slot]];
            let (cx, cy, cz) = cell_of(ids[slot]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &other in bucket {
                            if component[other] == usize::MAX
                                && cloud.points[ids[other]].distance_squared(&p) <= eps2
                            {
                                component[other] = label;
                                members.push(ids[other]);
                                stack.push(other);
                            }
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }

    // Seeds are visited in ascending index order, so components already
    // come out ordered by smallest member.
    let (clusters, discarded) = components
        .into_iter()
        .partition(|c| c.len() >= params.min_points);
    Clustering { clusters, discarded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(0, points)
    }

    #[test]
    fn two_separated_blobs() {
        let mut pts = Vec::new();
        for k in 0..6 {
            pts.push(Point3::new(0.1 * k as f64, 0.0, 0.0));
            pts.push(Point3::new(10.0 + 0.1 * k as f64, 0.0, 0.0));
        }
        let c = cloud(pts);
        let all: Vec<usize> = (0..c.len()).collect();
        let out = cluster(&all, &c, &ClusterParams::default());
        assert_eq!(out.clusters.len(), 2);
        assert_eq!(out.clusters[0], vec![0, 2, 4, 6, 8, 10]);
        assert!(out.discarded.is_empty());
    }

    #[test]
    fn chain_is_one_component() {
        let c = cloud((0..20).map(|k| Point3::new(0.4 * k as f64, 0.0, 0.0)).collect());
        let all: Vec<usize> = (0..20).collect();
        let out = cluster(&all, &c, &ClusterParams::default());
        assert_eq!(out.clusters, vec![all]);
    }

    #[test]
    fn small_components_are_reported() {
        let c = cloud(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(5.1, 0.0, 0.0),
        ]);
        let out = cluster(&[0, 1, 2], &c, &ClusterParams { min_points: 2, ..Default::default() });
        assert_eq!(out.clusters, vec![vec![1, 2]]);
        assert_eq!(out.discarded, vec![vec![0]]);
    }

    #[test]
    fn subset_and_empty_input() {
        let c = cloud((0..10).map(|k| Point3::new(0.1 * k as f64, 0.0, 0.0)).collect());
        assert_eq!(cluster(&[], &c, &ClusterParams::default()), Clustering::default());
        let out = cluster(&[9, 3, 3, 5, 7, 1], &c, &ClusterParams::default());
        assert_eq!(out.clusters, vec![vec![1, 3, 5, 7, 9]]);
    }

    #[test]
    fn negative_coordinates_use_floor_cells() {
        let c = cloud(vec![Point3::new(-0.01, 0.0, 0.0), Point3::new(0.01, 0.0, 0.0)]);
        let out = cluster(&[0, 1], &c, &ClusterParams { min_points: 1, ..Default::default() });
        assert_eq!(out.clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn params_validated() {
        assert!(ClusterParams { neighbor_radius: 0.0, ..Default::default() }.validate().is_err());
        assert!(ClusterParams { min_points: 0, ..Default::default() }.validate().is_err());
        assert!(ClusterParams::default().validate().is_ok());
    }
}
