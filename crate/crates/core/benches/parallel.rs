//! Sequential vs rayon execution of the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use label3d_core::dataset::{open_sequence, AnnotationRecord, Provenance, SCHEMA_VERSION};
use label3d_core::eval::{run_evaluation, EvalOptions};
use label3d_core::exec::Exec;
use label3d_core::geometry::{project_points_with, Point3, PointCloud};
use label3d_core::lift::{ClusterParams, OrientedBox3D};
use label3d_core::mask::Mask2D;
use label3d_core::service::pipeline::lift_frame;
use label3d_core::synthetic::{self, planted_scene};
use label3d_core::vision::{mock::fill_boxes, Box2D, ImageRef};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

/// 100k ground points plus `objects` boxes of 4k points each.
fn dense_frame(objects: usize) -> (PointCloud, Vec<Mask2D>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = synthetic::camera();
    let mut pts: Vec<Point3> = (0..100_000)
        .map(|_| Point3::new(rng.random_range(-40.0..60.0), rng.random_range(-40.0..40.0), -1.7))
        .collect();
    let mut boxes = Vec::new();
    for k in 0..objects {
        let c = [10.0 + 3.0 * k as f64, -6.0 + 2.5 * k as f64, -0.9];
        for _ in 0..4000 {
            pts.push(Point3::new(
                c[0] + rng.random_range(-1.0..1.0),
                c[1] + rng.random_range(-0.5..0.5),
                c[2] + rng.random_range(-0.7..0.7),
            ));
        }
        let corners: Vec<_> = [(-1.0, -0.5, -0.7), (1.0, 0.5, 0.7), (-1.0, 0.5, 0.7), (1.0, -0.5, -0.7)]
            .iter()
            .filter_map(|(x, y, z)| cam.project(&Point3::new(c[0] + x, c[1] + y, c[2] + z)))
            .collect();
        let (u0, u1) = corners.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.u), b.max(p.u)));
        let (v0, v1) = corners.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.v), b.max(p.v)));
        boxes.push(Box2D::new(u0, v0, u1, v1, 0.9, "thing"));
    }
    let image = ImageRef::new(0, cam.width(), cam.height(), vec![], "image/png");
    let masks = fill_boxes(&boxes, &image).unwrap().iter().map(|m| m.decode().unwrap()).collect();
    (PointCloud::new(0, pts), masks)
}

fn projection(c: &mut Criterion) {
    let (cloud, _) = dense_frame(0);
    let cam = synthetic::camera();
    let mut g = c.benchmark_group("project_100k");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(project_points_with(&cloud, &cam, exec)))
        });
    }
    g.finish();
}

fn lifting(c: &mut Criterion) {
    let (cloud, masks) = dense_frame(5);
    let cam = synthetic::camera();
    let conf = vec![0.9; masks.len()];
    let params = ClusterParams::default();
    let mut g = c.benchmark_group("lift_frame_120k");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(lift_frame(&cloud, &cam, &masks, &conf, "thing", &params, exec).unwrap()))
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let scene = planted_scene(dir.path(), 8).unwrap();
    let manifest = open_sequence(dir.path(), &Default::default()).unwrap();
    let records: Vec<AnnotationRecord> = scene
        .frames
        .iter()
        .flat_map(|&f| {
            scene.objects.iter().enumerate().map(move |(k, o)| (f, k, o.class_text.clone()))
        })
        .map(|(f, k, class_text)| AnnotationRecord {
            schema_version: SCHEMA_VERSION,
            frame_id: f,
            instance_id: k as u32,
            point_indices: scene.object_ranges[f as usize][k].clone().collect(),
            bbox: OrientedBox3D { cx: 0.0, cy: 0.0, cz: 0.0, dx: 1.0, dy: 1.0, dz: 1.0, yaw: 0.0 },
            provenance: Provenance { prompt: class_text.clone(), iterations: 0, backend: "bench".into() },
            class_text,
            created_at: Default::default(),
        })
        .collect();
    let mut g = c.benchmark_group("evaluate_8_frames");
    for (name, exec) in MODES {
        let options = EvalOptions { exec, ..Default::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_evaluation(&manifest, &records, &scene.frames, &scene.class_map, &options).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, projection, lifting, evaluation);
criterion_main!(benches);
