use serde::{Deserialize, Serialize};

use super::{Track, TrackEntry};
use crate::lift::InstanceLabel3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationParams {
    /// Gate at zero frame gap, meters.
    pub base_gate: f64,
    /// Gate growth per frame of separation, meters.
    pub max_speed: f64,
    /// Frames a track may go unmatched and still be continued.
    pub max_gap: u32,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            base_gate: 2.0,
            max_speed: 15.0,
            max_gap: 3,
        }
    }
}

impl AssociationParams {
    pub fn gate(&self, frame_gap: u32) -> f64 {
        self.base_gate + frame_gap as f64 * self.max_speed
    }
}

/// Greedy nearest-centroid association, frame by frame, among labels with
/// the same class text. Candidate pairs are taken in order of distance,
/// then label instance id, then track id. Unmatched labels open tracks.
pub fn associate(labels_by_frame: &[(u32, Vec<InstanceLabel3D>)], params: &AssociationParams) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    for (frame_id, labels) in labels_by_frame {
        let frame_id = *frame_id;
        let mut pairs: Vec<(f64, u32, usize, usize)> = Vec::new();
        for (ti, track) in tracks.iter().enumerate() {
            let last = track.entries.last().expect("tracks are never empty");
            if last.frame_id >= frame_id {
                continue;
            }
            let gap = frame_id - last.frame_id;
            if gap > params.max_gap + 1 {
                continue;
            }
            for (li, label) in labels.iter().enumerate() {
                if label.class_text != track.class_text {
                    continue;
                }
                let d = last.bbox.center().distance_squared(&label.bbox.center()).sqrt();
                if d <= params.gate(gap) {
                    pairs.push((d, label.instance_id, ti, li));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut track_used = vec![false; tracks.len()];
        let mut label_used = vec![false; labels.len()];
        for (_, _, ti, li) in pairs {
            if track_used[ti] || label_used[li] {
                continue;
            }
            track_used[ti] = true;
            label_used[li] = true;
            tracks[ti].entries.push(TrackEntry::detected(frame_id, &labels[li]));
        }

        let mut fresh: Vec<usize> = (0..labels.len()).filter(|&li| !label_used[li]).collect();
        fresh.sort_by_key(|&li| labels[li].instance_id);
        for li in fresh {
            let label = &labels[li];
            tracks.push(Track {
                track_id: tracks.len() as u32,
                class_text: label.class_text.clone(),
                entries: vec![TrackEntry::detected(frame_id, label)],
                skipped: false,
            });
        }
    }
    tracks
}
