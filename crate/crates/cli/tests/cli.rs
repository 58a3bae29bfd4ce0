use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cvmh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvmh"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("CVMH_THREADS", "1")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{ "embed_dim": 8, "num_classes": 3, "input_size": [32, 32] }},
  "train": {{ "batch_size": 2, "steps": 4, "seed": 1, "tile": {{ "size": 32, "stride": 32 }} {extra} }},
  "data": {{ "manifest": "data/manifest.json" }},
  "output_dir": "run"
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn synth_train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = cvmh(&["synth", "--out", p(&data), "--images", "2", "--size", "32", "--classes", "3", "--seed", "7"]);
    assert!(synth.status.success());
    assert!(data.join("manifest.json").exists());

    let cfg = write_config(dir.path(), "");
    let summary = json(&cvmh(&["train", "--config", p(&cfg)]));
    assert_eq!(summary["steps_run"], 4);
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let resumed = json(&cvmh(&["train", "--config", p(&cfg), "--steps", "6", "--resume", p(&run.join("last.cvck"))]));
    assert_eq!(resumed["steps_run"], 2);
    assert_eq!(resumed["final_step"], 6);

    let report = json(&cvmh(&["eval", "--config", p(&cfg), "--checkpoint", p(&run.join("last.cvck"))]));
    let oa = report["metrics"]["oa"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));
    assert_eq!(report["step"], 6);
    assert_eq!(report["metrics"]["pixels"], 2 * 32 * 32);

    let pred = dir.path().join("pred.ppm");
    let out = cvmh(&[
        "predict",
        "--checkpoint",
        p(&run.join("best.cvck")),
        "--image",
        p(&data.join("img_000.ppm")),
        "--out",
        p(&pred),
        "--tile",
        "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&pred).unwrap();
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(cvmh(&["synth", "--out", p(&data), "--images", "2", "--size", "32", "--classes", "3"]).status.success());
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    json(&cvmh(&["train", "--config", p(&cfg), "--out", p(&a), "--seed", "5", "--steps", "3"]));
    json(&cvmh(&["train", "--config", p(&cfg), "--out", p(&b), "--seed", "5", "--steps", "3"]));
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
}

#[test]
fn bench_reports_equal_costs_for_both_scans() {
    let rows = json(&cvmh(&["bench", "--embed-dim", "8", "--size", "32", "--repeats", "1"]));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["scan"], "ss2d");
    assert_eq!(rows[1]["scan"], "cs2d");
    assert_eq!(rows[0]["params"], rows[1]["params"]);
    assert_eq!(rows[0]["flops"], rows[1]["flops"]);
    assert!(rows[0]["forward_ms_median"].as_f64().unwrap() > 0.0);
}

#[test]
fn inspect_prints_default_cost() {
    let v = json(&cvmh(&["inspect"]));
    let params = v["params"].as_u64().unwrap();
    assert!((24_000_000..38_000_000).contains(&params), "{params}");
    assert_eq!(v["encoder_stages"][3]["channels"], 768);
    assert_eq!(v["model"]["scan_mode"], "cs2d");
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cvmh(&["train"]).status.code(), Some(2));
    assert_eq!(cvmh(&["eval", "--config", p(&dir.path().join("missing.json"))]).status.code(), Some(4));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"data": {"manifest": "m.json"}, "unknown": 1}"#).unwrap();
    assert_eq!(cvmh(&["inspect", "--config", p(&bad)]).status.code(), Some(2));

    let data = dir.path().join("data");
    assert!(cvmh(&["synth", "--out", p(&data), "--images", "1", "--size", "32", "--classes", "3"]).status.success());
    let cfg = write_config(dir.path(), r#", "optimizer": { "lr": 1e30 }"#);
    let out = cvmh(&["train", "--config", p(&cfg), "--steps", "20"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));

    let out = Command::new(env!("CARGO_BIN_EXE_cvmh")).arg("inspect").env("CVMH_THREADS", "many").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
