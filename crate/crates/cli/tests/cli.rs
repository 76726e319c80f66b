use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn maskpoint(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_maskpoint"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "maskpoint {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY_MODEL: &str =
    r#""model": {"backbone_channels": 8, "mask_channels": 8, "keypoint_channels": 8, "box_hidden": 32}"#;

fn dataset(dir: &Path) {
    maskpoint(
        dir,
        &[
            "gen-data",
            "--out",
            "data",
            "--scenes",
            "4",
            "--size",
            "64",
            "--classes",
            "4",
            "--overlap",
            "off",
            "--seed",
            "5",
        ],
    );
    maskpoint(
        dir,
        &[
            "make-labels",
            "--annotations",
            "data/index.json",
            "--k",
            "8",
            "--sampling",
            "uniform",
            "--epsilon",
            "2",
            "--center",
            "on",
            "--seed",
            "0",
            "--out",
            "data/index.json",
        ],
    );
}

#[test]
fn make_labels_adds_points_and_centers() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    assert_eq!(std::fs::read_dir(tmp.path().join("data/images")).unwrap().count(), 4);
    let index: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("data/index.json")).unwrap()).unwrap();
    let anns = index["annotations"].as_array().unwrap();
    assert!(!anns.is_empty());
    for a in anns {
        assert_eq!(a["contour_points"].as_array().unwrap().len(), 8);
        assert_eq!(a["center"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn train_writes_one_log_line_per_iteration_and_eval_reads_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    std::fs::write(
        dir.join("cfg.json"),
        format!(r#"{{"iterations": 3, "batch_images": 2, "fusion": {{"k": 8}}, {TINY_MODEL}}}"#),
    )
    .unwrap();
    maskpoint(
        dir,
        &[
            "train",
            "--config",
            "cfg.json",
            "--data",
            "data",
            "--out",
            "run",
            "--coco-preset",
        ],
    );
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["iteration"], i);
        assert_eq!(line["alpha"], 0.1);
        for field in ["l_cls", "l_box", "l_mask", "l_keypoint", "total"] {
            assert!(line[field].as_f64().unwrap().is_finite(), "{field}");
        }
    }

    let out = maskpoint(dir, &["eval", "--checkpoint", "run/checkpoint.bin", "--data", "data"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for field in [
        "mask_ap",
        "ap50",
        "keypoint_pck",
        "contour_only_ap",
        "contour_only_ap50",
    ] {
        let v = report[field].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{field} = {v}");
    }

    maskpoint(
        dir,
        &[
            "export-heatmaps",
            "--checkpoint",
            "run/checkpoint.bin",
            "--image",
            "data/images/000000.png",
            "--out",
            "hm",
        ],
    );
    assert!(dir.join("hm").is_dir());
}

#[test]
fn train_without_labels_fails_with_a_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    maskpoint(
        dir,
        &[
            "gen-data", "--out", "data", "--scenes", "2", "--size", "64", "--seed", "1",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_maskpoint"))
        .args(["train", "--data", "data", "--out", "run"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("make-labels"));
}

#[test]
fn ablate_emits_three_rows_in_grid_order() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    std::fs::write(
        dir.join("grid.json"),
        format!(
            r#"{{"train_data": "data", "eval_data": "data",
                 "base": {{"iterations": 1, "batch_images": 1, "fusion": {{"k": 8}}, {TINY_MODEL}}},
                 "sweep": [{{"field": "mode", "values": ["add", "max", "multiply"]}}]}}"#
        ),
    )
    .unwrap();
    let out = maskpoint(
        dir,
        &["ablate", "--grid", "grid.json", "--out", "abl", "--deterministic"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("setting"));
    assert!(lines[1].starts_with("add"));
    assert!(lines[2].starts_with("max"));
    assert!(lines[3].starts_with("multiply"));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
}
