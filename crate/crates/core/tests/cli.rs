//! The `cascade-rcnn` binary end to end: exit codes and output layouts.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

const PIPELINE_LIMIT: Duration = Duration::from_secs(60);

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cascade-rcnn"))
}

fn run(dir: &Path, args: &[&str]) -> i32 {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

/// A small dataset in a fresh directory.
fn small_dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gen.json"),
        r#"{"n_images": 60, "gts_per_image": [1, 3], "proposals_per_gt": 24, "background_per_image": 16}"#,
    )
    .unwrap();
    ok(
        dir.path(),
        &["gen", "--config", "gen.json", "--out", "data.jsonl"],
    );
    dir
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &[]), 1);
    assert_eq!(run(dir.path(), &["train", "--out", "m.json"]), 1);
    assert_eq!(
        run(dir.path(), &["gen", "--out", "d.jsonl", "--frobnicate"]),
        1
    );
    assert_eq!(run(dir.path(), &["--help"]), 0);
}

#[test]
fn bad_inputs_exit_two() {
    let dir = small_dataset();
    let d = dir.path();
    ok(
        d,
        &[
            "train",
            "--data",
            "data.jsonl",
            "--holdout",
            "20",
            "--stages",
            "1",
            "--out",
            "m.json",
        ],
    );

    let model = read(d, "m.json");
    fs::write(d.join("cut.json"), &model[..model.len() / 2]).unwrap();
    let args = [
        "infer",
        "--model",
        "cut.json",
        "--data",
        "data.jsonl",
        "--out",
        "x.jsonl",
    ];
    assert_eq!(run(d, &args), 2);

    assert_eq!(
        run(
            d,
            &[
                "eval",
                "--dets",
                "missing.jsonl",
                "--data",
                "data.jsonl",
                "--out",
                "ap.csv"
            ]
        ),
        2
    );

    fs::write(
        d.join("bad.jsonl"),
        "{\"image_id\": 0, \"width\": 640.0}\nnot json\n",
    )
    .unwrap();
    assert_eq!(
        run(d, &["train", "--data", "bad.jsonl", "--out", "m2.json"]),
        2
    );

    let curve = [
        "curve",
        "--model",
        "m.json",
        "--data",
        "data.jsonl",
        "--stage",
        "2",
        "--out",
        "c.csv",
    ];
    assert_eq!(run(d, &curve), 1);
}

#[test]
fn full_pipeline_on_the_default_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = Instant::now();
    ok(d, &["gen", "--out", "data.jsonl"]);
    ok(d, &["train", "--data", "data.jsonl", "--out", "model.json"]);
    ok(
        d,
        &[
            "infer",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--out",
            "dets.jsonl",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--dets",
            "dets.jsonl",
            "--data",
            "data.jsonl",
            "--out",
            "ap.csv",
        ],
    );
    let elapsed = start.elapsed();
    assert!(elapsed < PIPELINE_LIMIT, "{elapsed:?}");

    let ap = read(d, "ap.csv");
    let lines: Vec<&str> = ap.lines().collect();
    assert_eq!(lines[0], "threshold,ap");
    assert_eq!(lines.len(), 12);
    assert!(lines[1].starts_with("0.500000,"));
    assert!(lines[11].starts_with("mean,"));
    let mean: f64 = lines[11]["mean,".len()..].parse().unwrap();
    assert!(mean > 0.0 && mean <= 1.0);

    let first = read(d, "dets.jsonl");
    let det: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["image_id", "class_id", "bbox", "score"] {
        assert!(det.get(key).is_some(), "{key} missing in {det}");
    }

    ok(
        d,
        &[
            "report",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--out",
            "report.csv",
        ],
    );
    let report = read(d, "report.csv");
    let rows: Vec<&str> = report.lines().collect();
    assert!(rows[0].starts_with("stage,ap,ap50,ap55"));
    let labels: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["1", "2", "3", "1~2", "1~3"]);

    ok(
        d,
        &[
            "hist",
            "--data",
            "data.jsonl",
            "--model",
            "model.json",
            "--out",
            "hist.csv",
        ],
    );
    let hist = read(d, "hist.csv");
    assert!(hist.starts_with("stage,bin_low,bin_high,count\n"));
    assert!(hist.contains("stage,threshold,percent_above\n"));
    assert!(hist.lines().any(|l| l.starts_with("3,0.700000,")));

    ok(
        d,
        &[
            "curve",
            "--model",
            "model.json",
            "--data",
            "data.jsonl",
            "--stage",
            "3",
            "--out",
            "curve.csv",
        ],
    );
    let curve = read(d, "curve.csv");
    assert!(curve.starts_with("bin_low,bin_high,count,mean_input_iou,mean_output_iou\n"));
    assert!(curve.lines().count() > 10);
}

#[test]
fn ablation_flags_train_and_evaluate() {
    let dir = small_dataset();
    let d = dir.path();
    let train = [
        "train",
        "--data",
        "data.jsonl",
        "--holdout",
        "20",
        "--no-iou-up",
        "--no-stat",
        "--out",
        "m.json",
    ];
    ok(d, &train);
    let model: serde_json::Value = serde_json::from_str(&read(d, "m.json")).unwrap();
    let stages = model["detector"]["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 3);
    for s in stages {
        assert_eq!(s["u"], 0.5);
        assert_eq!(s["stats"]["mean"], serde_json::json!([0.0, 0.0, 0.0, 0.0]));
        assert_eq!(s["stats"]["std"], serde_json::json!([1.0, 1.0, 1.0, 1.0]));
    }

    ok(
        d,
        &[
            "infer",
            "--model",
            "m.json",
            "--data",
            "data.jsonl",
            "--holdout",
            "20",
            "--ensemble",
            "--out",
            "e.jsonl",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--dets",
            "e.jsonl",
            "--data",
            "data.jsonl",
            "--holdout",
            "20",
            "--out",
            "ap.csv",
        ],
    );
    assert!(read(d, "ap.csv").starts_with("threshold,ap\n"));

    for mode in ["baseline", "iterative", "integral"] {
        let out = format!("{mode}.json");
        ok(
            d,
            &[
                "train",
                "--data",
                "data.jsonl",
                "--holdout",
                "20",
                "--mode",
                mode,
                "--out",
                &out,
            ],
        );
        ok(
            d,
            &[
                "infer",
                "--model",
                &out,
                "--data",
                "data.jsonl",
                "--holdout",
                "20",
                "--add-gt",
                "--out",
                "d.jsonl",
            ],
        );
    }
}

#[test]
fn partial_train_config_overrides_defaults() {
    let dir = small_dataset();
    let d = dir.path();
    fs::write(
        d.join("t.json"),
        r#"{"epochs": 50, "features": {"evidence_noise": 0.2}}"#,
    )
    .unwrap();
    let args = [
        "train",
        "--data",
        "data.jsonl",
        "--holdout",
        "20",
        "--train-config",
        "t.json",
        "--out",
        "m.json",
    ];
    ok(d, &args);
    let model: serde_json::Value = serde_json::from_str(&read(d, "m.json")).unwrap();
    assert_eq!(model["detector"]["feature_config"]["evidence_noise"], 0.2);
    assert_eq!(
        model["detector"]["feature_config"]["observation_noise"],
        0.01
    );

    fs::write(d.join("bad.json"), r#"{"epoch": 50}"#).unwrap();
    let args = [
        "train",
        "--data",
        "data.jsonl",
        "--train-config",
        "bad.json",
        "--out",
        "m2.json",
    ];
    assert_eq!(run(d, &args), 2);
}
