use std::process::Command;

use label3d_core::synthetic::planted_scene;

fn label3d() -> Command {
    Command::new(env!("CARGO_BIN_EXE_label3d"))
}

#[test]
fn annotate_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    planted_scene(dir.path(), 3).unwrap();
    let root = dir.path();
    let out = label3d()
        .args(["annotate", "--config"])
        .arg(root.join("pipeline.toml"))
        .arg("--sequence")
        .arg(root)
        .args(["--prompt", "the floating toy", "--frames", "0-2", "--auto-accept"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["resolved_text"], "balloon");

    let report = root.join("report.json");
    let out = label3d()
        .arg("evaluate")
        .arg("--sequence")
        .arg(root)
        .arg("--annotations")
        .arg(root.join("annotations.jsonl"))
        .args(["--frames", "0-2", "--class-map"])
        .arg(root.join("classes.json"))
        .arg("--json")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("100.0"), "{table}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let balloon = v["classes"].as_array().unwrap().iter().find(|c| c["class_id"] == 99).unwrap();
    assert_eq!(balloon["iou"], 1.0);
}

#[test]
fn exhausted_annotate_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    planted_scene(dir.path(), 1).unwrap();
    let out = label3d()
        .args(["annotate", "--config"])
        .arg(dir.path().join("pipeline.toml"))
        .arg("--sequence")
        .arg(dir.path())
        .args(["--prompt", "a unicorn", "--frames", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "exhausted");
    assert!(!dir.path().join("annotations.jsonl").exists());
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    planted_scene(dir.path(), 1).unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    let out = label3d()
        .arg("evaluate")
        .arg("--sequence")
        .arg(dir.path())
        .arg("--annotations")
        .arg(dir.path().join("bad.jsonl"))
        .args(["--frames", "0", "--class-map"])
        .arg(dir.path().join("classes.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let empty = tempfile::tempdir().unwrap();
    let out = label3d()
        .args(["annotate", "--config"])
        .arg(dir.path().join("pipeline.toml"))
        .arg("--sequence")
        .arg(empty.path())
        .args(["--prompt", "car", "--frames", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_1() {
    let out = label3d().args(["annotate", "--frames", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = label3d().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
