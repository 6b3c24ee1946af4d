//! Command-line behaviour: config precedence, error reporting, outputs.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hccgraph")).current_dir(dir).args(args).output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("a.json"), r#"{"seed": 1, "synth": {"n_patients": 10}}"#).unwrap();
    assert!(run(d.path(), &["synth", "--config", "a.json", "--out", "x.json"]).status.success());
    assert!(run(d.path(), &["synth", "--config", "a.json", "--seed", "2", "--out", "y.json"]).status.success());
    assert!(run(d.path(), &["synth", "--seed", "1", "--n-patients", "10", "--out", "z.json"]).status.success());
    let x = std::fs::read(d.path().join("x.json")).unwrap();
    assert_ne!(x, std::fs::read(d.path().join("y.json")).unwrap());
    assert_eq!(x, std::fs::read(d.path().join("z.json")).unwrap());
    assert_eq!(json(&d.path().join("x.json"))["patients"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_measurements_is_reported() {
    let d = tempfile::tempdir().unwrap();
    assert!(run(d.path(), &["synth", "--n-patients", "8", "--out", "c.json"]).status.success());
    let mut v = json(&d.path().join("c.json"));
    v["patients"][3]["qeasl_followup"] = serde_json::Value::Null;
    v["patients"][3]["label"] = serde_json::Value::Null;
    std::fs::write(d.path().join("c.json"), v.to_string()).unwrap();

    let out = run(d.path(), &["label", "--input", "c.json", "--out", "l.json"]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "MissingMeasurements");

    let out = run(d.path(), &["label", "--input", "c.json", "--out", "l.json", "--allow-missing", "--quiet"]);
    assert!(out.status.success());
    assert!(json(&d.path().join("l.json"))["patients"][3]["label"].is_null());
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["graph", "--input", "absent.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_kind(&out), "IoError");

    let out = run(d.path(), &["triage", "--thresholds", "0.4", "--input", "x.json", "--predictions", "p.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "InvalidConfig");

    std::fs::write(d.path().join("bad.json"), r#"{"seeed": 3}"#).unwrap();
    let out = run(d.path(), &["synth", "--config", "bad.json", "--out", "c.json"]);
    assert_eq!(error_kind(&out), "InvalidConfig");
}

#[test]
fn csv_cohort_runs_through_crossval_and_triage() {
    let d = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,Cirrhosis,Sorafenib,feat_0,feat_1,feat_2,label\n");
    for i in 0..30 {
        let r = i % 2;
        let x = if r == 1 { 1.0 } else { -1.0 };
        csv.push_str(&format!("P{i:02},{r},{},{},{},{},{}\n", (i / 2) % 2, x + 0.01 * i as f64, -x, 0.1 * (i % 5) as f64, if r == 1 { "R" } else { "NR" }));
    }
    std::fs::write(d.path().join("c.csv"), csv).unwrap();
    std::fs::write(d.path().join("run.json"), r#"{"train": {"epochs": 60}, "k_folds": 3, "n_mc_samples": 20}"#).unwrap();

    let out = run(d.path(), &["crossval", "--config", "run.json", "--input", "c.csv", "--out", "cv.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("Method | Accuracy (std) | F1 (std)"));
    let cv = json(&d.path().join("cv.json"));
    assert_eq!(cv["rows"][0]["per_fold"].as_array().unwrap().len(), 3);

    assert!(run(d.path(), &["train", "--config", "run.json", "--input", "c.csv", "--out", "m.json", "--quiet"]).status.success());
    assert!(run(d.path(), &["predict", "--config", "run.json", "--input", "c.csv", "--model", "m.json", "--out", "p.json", "--quiet"]).status.success());
    let out = run(d.path(), &["triage", "--input", "c.csv", "--predictions", "p.json", "--out", "t.json"]);
    assert!(out.status.success());
    let t = json(&d.path().join("t.json"));
    let thresholds: Vec<f64> = t["reports"].as_array().unwrap().iter().map(|r| r["threshold"].as_f64().unwrap()).collect();
    assert_eq!(thresholds, [0.85, 0.90, 0.95]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("node_id  final  confidence  true  retained"));
}

#[test]
fn stdout_is_primary_output_without_out() {
    let d = tempfile::tempdir().unwrap();
    assert!(run(d.path(), &["synth", "--n-patients", "6", "--out", "c.json"]).status.success());
    let out = run(d.path(), &["graph", "--input", "c.json"]);
    assert!(!out.status.success(), "synthetic cohort has no feature vectors yet");
    assert_eq!(error_kind(&out), "GraphError");
    std::fs::write(d.path().join("e.json"), r#"{"encoder": {"latent_dim": 4, "epochs": 2}}"#).unwrap();
    assert!(run(d.path(), &["encode", "--config", "e.json", "--input", "c.json", "--out", "f.json", "--quiet"]).status.success());
    let out = run(d.path(), &["graph", "--input", "f.json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n"], 6);
}
