use std::path::Path;
use std::process::{Command, Output};

fn aerocap(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aerocap"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

#[test]
fn pipeline_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let ds = out.join("dataset.jsonl");
    let ds = ds.to_str().unwrap();
    assert!(aerocap(out, &["--seed", "4", "generate", "--frames", "8", "--occlusion", "0.3,0"]).status.success());
    let o = aerocap(out, &["--seed", "4", "simulate", "--dataset", ds, "--refiner", "oracle", "--pipelined"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = out.join("estimates.jsonl");
    let est = est.to_str().unwrap();
    for args in [
        vec!["eval", "--dataset", ds, "--estimates", est],
        vec!["export-csv", "--dataset", ds, "--estimates", est],
        vec!["ablate", "--dataset", ds, "--refiner", "oracle"],
    ] {
        let o = aerocap(out, &args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["session_report.json", "session_report.csv", "eval_estimates.json", "trajectory.csv", "ablation.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("session_report.json")).unwrap()).unwrap();
    assert_eq!(report["pipelined"], true);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("frame_id,camera,x,y,z,gt_x,gt_y,gt_z\n"));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(aerocap(out, &["simulate", "--dataset", "/nonexistent.jsonl"]).status.code(), Some(2));
    assert_eq!(aerocap(out, &["generate", "--frames", "0"]).status.code(), Some(2));
    let cfg = out.join("bad.json");
    std::fs::write(&cfg, r#"{"scene": {"fps": -1}}"#).unwrap();
    assert_eq!(aerocap(out, &["--config", cfg.to_str().unwrap(), "generate"]).status.code(), Some(2));
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(aerocap(out, &["--config", cfg.to_str().unwrap(), "generate"]).status.code(), Some(2));
    // Unknown subcommand is rejected by the argument parser.
    assert_eq!(aerocap(out, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("cfg.json");
    std::fs::write(&cfg, r#"{"scene": {"frames": 3}, "noise": {"keypoint_sigma_px": 0.0, "occlusion_prob": [0.0, 0.0]}}"#)
        .unwrap();
    assert!(aerocap(out, &["--config", cfg.to_str().unwrap(), "generate"]).status.success());
    let lines = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 3);
}
