use std::collections::HashMap;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use label3d_core::dataset::{open_sequence, AnnotationRecord, Provenance, SequenceManifest, SCHEMA_VERSION};
use label3d_core::eval::{confusion, iou, merge_confusions, run_evaluation, ClassConfusion, EvalOptions};
use label3d_core::exec::Exec;
use label3d_core::lift::OrientedBox3D;
use label3d_core::synthetic::{planted_scene, PlantedScene};

fn record(frame_id: u32, instance_id: u32, class_text: &str, point_indices: Vec<usize>) -> AnnotationRecord {
    AnnotationRecord {
        schema_version: SCHEMA_VERSION,
        frame_id,
        instance_id,
        class_text: class_text.into(),
        point_indices,
        bbox: OrientedBox3D { cx: 0.0, cy: 0.0, cz: 0.0, dx: 1.0, dy: 1.0, dz: 1.0, yaw: 0.0 },
        provenance: Provenance { prompt: class_text.into(), iterations: 0, backend: "test".into() },
        created_at: Utc.timestamp_opt(0, 0).unwrap(),
    }
}

/// Counts by a per-point tally into a hash map.
fn oracle(pred: &[Option<u16>], gt: &[u16], mask: &[usize]) -> HashMap<u16, (u64, u64, u64)> {
    let mut m: HashMap<u16, (u64, u64, u64)> = HashMap::new();
    for &i in mask {
        if pred[i] == Some(gt[i]) {
            m.entry(gt[i]).or_default().0 += 1;
            continue;
        }
        if let Some(p) = pred[i] {
            m.entry(p).or_default().1 += 1;
        }
        m.entry(gt[i]).or_default().2 += 1;
    }
    m
}

fn as_map(c: &[ClassConfusion]) -> HashMap<u16, (u64, u64, u64)> {
    c.iter().map(|c| (c.class_id, (c.tp, c.fp, c.fn_))).collect()
}

fn labeled(n: usize) -> impl Strategy<Value = (Vec<Option<u16>>, Vec<u16>, Vec<usize>)> {
    (
        prop::collection::vec(prop::option::of(0u16..5), n),
        prop::collection::vec(0u16..5, n),
        prop::collection::vec(any::<bool>(), n),
    )
        .prop_map(|(p, g, keep)| {
            let mask = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
            (p, g, mask)
        })
}

proptest! {
    #[test]
    fn counts_match_oracle((pred, gt, mask) in (1usize..300).prop_flat_map(labeled)) {
        prop_assert_eq!(as_map(&confusion(&pred, &gt, &mask).unwrap()), oracle(&pred, &gt, &mask));
    }

    #[test]
    fn merged_frames_equal_concatenation(
        (p1, g1, m1) in (1usize..100).prop_flat_map(labeled),
        (p2, g2, m2) in (1usize..100).prop_flat_map(labeled),
    ) {
        let merged = merge_confusions(confusion(&p1, &g1, &m1).unwrap(), confusion(&p2, &g2, &m2).unwrap());
        let off = p1.len();
        let pred: Vec<_> = p1.iter().chain(&p2).copied().collect();
        let gt: Vec<_> = g1.iter().chain(&g2).copied().collect();
        let mask: Vec<_> = m1.iter().copied().chain(m2.iter().map(|i| i + off)).collect();
        prop_assert_eq!(merged, confusion(&pred, &gt, &mask).unwrap());
    }

    #[test]
    fn fixing_a_point_never_lowers_its_class((mut pred, gt, mask) in (1usize..200).prop_flat_map(labeled), pick in any::<prop::sample::Index>()) {
        prop_assume!(!mask.is_empty());
        let i = mask[pick.index(mask.len())];
        let class = gt[i];
        let before = as_map(&confusion(&pred, &gt, &mask).unwrap())[&class];
        pred[i] = Some(class);
        let after = as_map(&confusion(&pred, &gt, &mask).unwrap())[&class];
        prop_assert!(iou(after.0, after.1, after.2).unwrap() >= iou(before.0, before.1, before.2).unwrap());
    }
}

fn fixture() -> (tempfile::TempDir, PlantedScene, SequenceManifest) {
    let dir = tempfile::tempdir().unwrap();
    let scene = planted_scene(dir.path(), 2).unwrap();
    let m = open_sequence(dir.path(), &Default::default()).unwrap();
    (dir, scene, m)
}

fn perfect(scene: &PlantedScene) -> Vec<AnnotationRecord> {
    let mut out = Vec::new();
    for f in &scene.frames {
        for (k, o) in scene.objects.iter().enumerate() {
            out.push(record(*f, k as u32, &o.class_text, scene.object_ranges[*f as usize][k].clone().collect()));
        }
    }
    out
}

#[test]
fn perfect_labels_score_one() {
    let (_d, scene, m) = fixture();
    let r = run_evaluation(&m, &perfect(&scene), &[0, 1], &scene.class_map, &EvalOptions::default()).unwrap();
    assert_eq!(r.class(99).unwrap().iou, Some(1.0));
    assert_eq!(r.class(10).unwrap().iou, Some(1.0));
    assert_eq!(r.mean_iou, Some(1.0));
    // unannotated ground counts as a miss for its own class only
    let ground = r.class(40).unwrap();
    assert_eq!((ground.tp, ground.fp), (0, 0));
    assert!(ground.fn_ > 0);
}

#[test]
fn fov_filter_drops_points_behind_the_camera() {
    let (_d, scene, m) = fixture();
    let recs = perfect(&scene);
    let with = run_evaluation(&m, &recs, &[0, 1], &scene.class_map, &EvalOptions::default()).unwrap();
    let without =
        run_evaluation(&m, &recs, &[0, 1], &scene.class_map, &EvalOptions { fov_filter: false, ..Default::default() })
            .unwrap();
    let total: u64 = [0, 1].iter().map(|&f| m.load_frame(f).unwrap().cloud.len() as u64).sum();
    assert_eq!(without.points_counted, total);
    assert!(with.points_counted < total);
    assert_eq!(with.class(99), without.class(99));
    assert!(with.class(40).unwrap().fn_ < without.class(40).unwrap().fn_);
}

#[test]
fn hand_counted_frame() {
    let (_d, scene, m) = fixture();
    let balloon: Vec<usize> = scene.object_ranges[0][0].clone().collect();
    let n = balloon.len() as u64;
    let car_start = scene.object_ranges[0][1].start;
    // first 10 balloon points, plus 5 car points called balloon
    let mut idx: Vec<usize> = balloon[..10].to_vec();
    idx.extend(car_start..car_start + 5);
    let r = run_evaluation(&m, &[record(0, 0, "balloon", idx)], &[0], &scene.class_map, &EvalOptions::default()).unwrap();
    let b = r.class(99).unwrap();
    assert_eq!((b.tp, b.fp, b.fn_), (10, 5, n - 10));
    assert_eq!(b.iou, Some(10.0 / (n + 5) as f64));
    let car = r.class(10).unwrap();
    assert_eq!((car.tp, car.fp, car.fn_), (0, 0, scene.object_ranges[0][1].len() as u64));
    assert_eq!(car.iou, Some(0.0));
}

#[test]
fn later_record_wins_and_unmapped_text_is_listed() {
    let (_d, scene, m) = fixture();
    let balloon: Vec<usize> = scene.object_ranges[0][0].clone().collect();
    let recs = vec![
        record(0, 0, "car", balloon.clone()),
        record(0, 1, "balloon", balloon.clone()),
        record(0, 2, "kite", balloon[..3].to_vec()),
    ];
    let r = run_evaluation(&m, &recs, &[0], &scene.class_map, &EvalOptions::default()).unwrap();
    assert_eq!(r.class(99).unwrap().tp, balloon.len() as u64);
    assert_eq!(r.class(10).unwrap().fp, 0);
    assert_eq!(r.unevaluated, vec!["kite".to_string()]);
}

#[test]
fn empty_annotations_score_zero() {
    let (_d, scene, m) = fixture();
    let r = run_evaluation(&m, &[], &[0, 1], &scene.class_map, &EvalOptions::default()).unwrap();
    assert_eq!(r.mean_iou, Some(0.0));
    assert!(r.classes.iter().all(|c| c.tp == 0 && c.fp == 0));
}

#[test]
fn sequential_and_parallel_agree() {
    let (_d, scene, m) = fixture();
    let recs = perfect(&scene);
    let run = |exec| {
        run_evaluation(&m, &recs, &[0, 1], &scene.class_map, &EvalOptions { exec, ..Default::default() }).unwrap()
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    assert_eq!(a.classes, b.classes);
    assert_eq!(a.points_counted, b.points_counted);
}

#[test]
fn unknown_frame_is_an_error() {
    let (_d, scene, m) = fixture();
    assert!(run_evaluation(&m, &[], &[7], &scene.class_map, &EvalOptions::default()).is_err());
}
