//! Synthetic sequences with planted objects, used by tests, benches and
//! demos. Everything is derived from a seed-free layout, so two builds of
//! the same scene are byte-identical.
//!
//! The scene is a sparse ground grid (1 m spacing, too sparse to form
//! clusters) with a floating balloon and a car moving across the frames.
//! The matching vision scenario returns, per frame, each object's projected
//! bounding rectangle padded by one pixel, with fill-box masks.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4};

use crate::dataset::fixture::write_sequence;
use crate::eval::ClassMap;
use crate::geometry::{CalibratedCamera, Point3};
use crate::interpreter::ScriptedReply;
use crate::vision::{Box2D, VisionScenarioEntry};

pub const IMAGE_SIZE: (u32, u32) = (640, 480);
pub const GROUND_CLASS: u16 = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedObject {
    pub class_text: String,
    pub class_id: u16,
    /// Points at frame 0, LiDAR frame.
    pub points: Vec<Point3>,
    /// Displacement per frame, meters.
    pub velocity: [f64; 3],
}

impl PlantedObject {
    pub fn points_at(&self, frame: u32) -> Vec<Point3> {
        let k = frame as f64;
        self.points
            .iter()
            .map(|p| Point3::new(p.x + k * self.velocity[0], p.y + k * self.velocity[1], p.z + k * self.velocity[2]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub root: PathBuf,
    pub frames: Vec<u32>,
    pub camera: CalibratedCamera,
    pub objects: Vec<PlantedObject>,
    /// Per frame, the index range of each object's points in the cloud.
    pub object_ranges: Vec<Vec<std::ops::Range<usize>>>,
    pub vision_scenario: Vec<VisionScenarioEntry>,
    pub llm_script: Vec<ScriptedReply>,
    pub class_map: ClassMap,
}

/// `K·[I|0]` for a 640x480 image.
pub fn projection() -> Matrix3x4<f64> {
    Matrix3x4::new(500.0, 0.0, 320.0, 0.0, 0.0, 500.0, 240.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

/// LiDAR (x forward, y left, z up) → camera (x right, y down, z forward).
pub fn velo_to_cam() -> Matrix3x4<f64> {
    Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0)
}

pub fn camera() -> CalibratedCamera {
    let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
    CalibratedCamera::new(k, velo_to_cam(), IMAGE_SIZE.0, IMAGE_SIZE.1).expect("valid synthetic camera")
}

/// Rounds through f32, as the point files store coordinates.
fn stored(p: Point3) -> Point3 {
    Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

fn balloon() -> PlantedObject {
    let mut points = Vec::new();
    let r = 0.4;
    let steps = 8;
    for i in -steps..=steps {
        for j in -steps..=steps {
            for k in -steps..=steps {
                let (dx, dy, dz) = (i as f64 * 0.1, j as f64 * 0.1, k as f64 * 0.1);
                if dx * dx + dy * dy + dz * dz <= r * r {
                    points.push(Point3::new(12.0 + dx, 2.0 + dy, 1.5 + dz));
                }
            }
        }
    }
    PlantedObject { class_text: "balloon".into(), class_id: 99, points, velocity: [0.0, 0.5, 0.0] }
}

fn car() -> PlantedObject {
    let mut points = Vec::new();
    for i in 0..=20 {
        for j in 0..=9 {
            for k in 0..=7 {
                points.push(Point3::new(13.0 + i as f64 * 0.2, -3.9 + j as f64 * 0.2, -0.7 + k as f64 * 0.2));
            }
        }
    }
    PlantedObject { class_text: "car".into(), class_id: 10, points, velocity: [1.0, 0.0, 0.0] }
}

fn ground() -> Vec<Point3> {
    let mut pts = Vec::new();
    for x in -10..=40 {
        for y in -15..=15 {
            pts.push(Point3::new(x as f64 + 0.5, y as f64 + 0.5, -1.7));
        }
    }
    pts
}

fn padded_box(points: &[Point3], cam: &CalibratedCamera, phrase: &str) -> Option<Box2D> {
    let px: Vec<_> = points.iter().filter_map(|p| cam.project(p)).collect();
    if px.len() != points.len() {
        return None;
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &px {
        u0 = u0.min(p.u);
        v0 = v0.min(p.v);
        u1 = u1.max(p.u);
        v1 = v1.max(p.v);
    }
    Some(Box2D::new(u0.floor() - 1.0, v0.floor() - 1.0, u1.ceil() + 1.0, v1.ceil() + 1.0, 0.9, phrase))
}

/// Writes a sequence of `frames` frames under `root` plus `vision.json`,
/// `llm.json`, `classes.json` and `pipeline.toml` next to it.
pub fn planted_scene(root: &Path, frames: u32) -> std::io::Result<PlantedScene> {
    let cam = camera();
    let objects = vec![balloon(), car()];
    let ground = ground();
    let mut written = Vec::new();
    let mut ranges = Vec::new();
    let mut scenario = Vec::new();
    for f in 0..frames {
        let mut pts: Vec<Point3> = Vec::new();
        let mut classes = Vec::new();
        let mut frame_ranges = Vec::new();
        for o in &objects {
            let start = pts.len();
            pts.extend(o.points_at(f).into_iter().map(stored));
            classes.resize(pts.len(), o.class_id);
            frame_ranges.push(start..pts.len());
            let b = padded_box(&pts[start..], &cam, &o.class_text).ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{} leaves the image", o.class_text))
            })?;
            scenario.push(VisionScenarioEntry {
                match_text_substring: o.class_text.clone(),
                frame_id: Some(f),
                boxes: vec![b],
                mask_mode: Default::default(),
                masks: vec![],
            });
        }
        pts.extend(ground.iter().copied().map(stored));
        classes.resize(pts.len(), GROUND_CLASS);
        ranges.push(frame_ranges);
        written.push((f, pts, Some(classes)));
    }
    write_sequence(root, &projection(), &velo_to_cam(), IMAGE_SIZE, &written)?;

    let llm_script = vec![
        ScriptedReply { expect: "wrong object, I meant the car".into(), reply: "car".into() },
        ScriptedReply { expect: "Request: the floating toy".into(), reply: "balloon".into() },
        ScriptedReply { expect: "Request: the vehicle".into(), reply: "car".into() },
        ScriptedReply { expect: "Request:".into(), reply: "unknown object".into() },
    ];
    let class_map: ClassMap = objects.iter().map(|o| (o.class_text.clone(), o.class_id)).collect();
    let json = |v: &dyn erased::Json| v.to_json();
    std::fs::write(root.join("vision.json"), json(&scenario))?;
    std::fs::write(root.join("llm.json"), json(&llm_script))?;
    std::fs::write(root.join("classes.json"), json(&class_map))?;
    std::fs::write(
        root.join("pipeline.toml"),
        "mode = \"per_frame_fuse\"\n\n[llm]\nmock = \"llm.json\"\n\n[vision]\nmock = \"vision.json\"\n",
    )?;

    Ok(PlantedScene {
        root: root.to_path_buf(),
        frames: (0..frames).collect(),
        camera: cam,
        objects,
        object_ranges: ranges,
        vision_scenario: scenario,
        llm_script,
        class_map,
    })
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{open_sequence, OpenOptions};

    #[test]
    fn scene_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let scene = planted_scene(dir.path(), 3).unwrap();
        let m = open_sequence(dir.path(), &OpenOptions::default()).unwrap();
        assert_eq!(m.frame_ids, vec![0, 1, 2]);
        assert_eq!(m.camera.width(), 640);
        let f = m.load_frame(2).unwrap();
        let labels = f.labels.unwrap();
        let r = scene.object_ranges[2][1].clone();
        assert!(labels.class_ids[r].iter().all(|&c| c == 10));
        assert_eq!(scene.vision_scenario.len(), 6);
    }
}
