use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn btsctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btsctl")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

/// Small recordings and windows keep every command under a few seconds.
const SMALL: [&str; 4] = ["--packets", "200", "--tau", "10"];

fn gen_small(out: &Path, rounds: &str) -> Output {
    let mut args = vec!["gen", "--out", out.to_str().unwrap(), "--rounds", rounds];
    args.extend(SMALL);
    btsctl(&args)
}

fn checksum(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("meta")).unwrap();
    let meta: toml::Value = toml::from_str(&text).unwrap();
    meta["checksum"].as_str().unwrap().to_string()
}

#[test]
fn gen_writes_one_directory_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let doc = json_of(&gen_small(&out, "1"));
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["rounds"].as_array().unwrap().len(), 1);
    assert_eq!(doc["rounds"][0]["shape"], serde_json::json!([800, 56, 4]));
    assert!(out.join("round1/meta").exists());
    assert!(!out.join("round2").exists());
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    json_of(&gen_small(&a, "4,6"));
    json_of(&gen_small(&b, "4,6"));
    for r in ["round4", "round6"] {
        assert_eq!(checksum(&a.join(r)), checksum(&b.join(r)));
    }
    assert_ne!(checksum(&a.join("round4")), checksum(&a.join("round6")));

    let again = gen_small(&a, "4");
    assert_eq!(again.status.code(), Some(1));
    let mut args = vec!["gen", "--out", a.to_str().unwrap(), "--rounds", "4", "--force"];
    args.extend(SMALL);
    assert!(btsctl(&args).status.success());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(btsctl(&["gen"]).status.code(), Some(1));
    assert_eq!(btsctl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(btsctl(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "lambda9 = 1.0\n").unwrap();
    let out = btsctl(&["--config", cfg.to_str().unwrap(), "gen", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = btsctl(&["gen", "--out", tmp.path().join("y").to_str().unwrap(), "--rounds", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = btsctl(&[
        "indicator",
        "--labeled",
        missing.to_str().unwrap(),
        "--unlabeled",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_drift_and_indicator_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    json_of(&gen_small(&data, "1,2,6"));
    let r = |id: u32| data.join(format!("round{id}")).to_str().unwrap().to_string();
    let run = tmp.path().join("run");

    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "iters = 3\nbatch = 4\nseed = 5\ntau = 10\n").unwrap();
    let (r1, r2, r6) = (r(1), r(2), r(6));
    let doc = json_of(&btsctl(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--labeled",
        &r1,
        "--unlabeled",
        &r2,
        "--out",
        run.to_str().unwrap(),
    ]));
    assert_eq!(doc["iterations"], 3);
    assert_eq!(doc["indicators"]["gamma"].as_array().unwrap().len(), 4);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let settings = std::fs::read_to_string(run.join("settings.toml")).unwrap();
    assert!(settings.contains("seed = 5"));

    let model = run.join("model.ckpt");
    let doc = json_of(&btsctl(&["predict", "--model", model.to_str().unwrap(), "--data", &r2]));
    assert_eq!(doc["schema_version"], 1);
    let confusion = doc["confusion"].as_array().unwrap();
    let total: u64 = confusion.iter().flat_map(|row| row.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, doc["frames"].as_u64().unwrap());
    assert!(doc["accuracy"].as_f64().unwrap() >= 0.0);

    let report = tmp.path().join("drift.json");
    let doc = json_of(&btsctl(&[
        "--dth",
        "1e-12",
        "--window",
        "5",
        "drift",
        "--model",
        model.to_str().unwrap(),
        "--data",
        &r6,
        "--out",
        report.to_str().unwrap(),
    ]));
    assert_eq!(doc["verdict"], "drift");
    assert_eq!(doc["window"], 5);
    assert!(doc["retrain_frames"].as_u64().unwrap() > 0);
    assert!(report.exists());

    let doc = json_of(&btsctl(&["--dth", "1e12", "drift", "--model", model.to_str().unwrap(), "--data", &r6]));
    assert_eq!(doc["verdict"], "no_drift");
    assert_eq!(doc["retrain_frames"], 0);

    let doc = json_of(&btsctl(&["--tau", "10", "indicator", "--labeled", &r1, "--unlabeled", &r6]));
    assert_eq!(doc["gamma"].as_array().unwrap().len(), 4);
    assert!(doc["unlabeled_accuracy"].as_f64().unwrap() <= 1.0);

    // The run directory already exists.
    let exists = btsctl(&[
        "train",
        "--labeled",
        &r1,
        "--unlabeled",
        &r2,
        "--out",
        run.to_str().unwrap(),
        "--iters",
        "1",
        "--tau",
        "10",
    ]);
    assert_eq!(exists.status.code(), Some(1));
}

#[test]
fn exploding_updates_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    json_of(&gen_small(&data, "1,2"));
    let out = btsctl(&[
        "train",
        "--labeled",
        data.join("round1").to_str().unwrap(),
        "--unlabeled",
        data.join("round2").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--tau",
        "10",
        "--iters",
        "5",
        "--batch",
        "4",
        "--lr",
        "1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_prints_a_versioned_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("bench.json");
    let mut args = vec!["bench", "--iters", "1", "--batch", "4", "--out", table.to_str().unwrap()];
    args.extend(SMALL);
    let out = btsctl(&args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "schema_version 1");
    assert_eq!(lines[1].split('\t').count(), 6);
    assert_eq!(lines.len(), 2 + 6);
    assert!(lines.iter().any(|l| l.starts_with("bts\t")));

    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["rows"].as_array().unwrap().len(), 6);
    assert_eq!(doc["eval_rounds"], serde_json::json!([2, 3, 4, 5, 6]));
}
