use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 5,
  "synth": {"n_users": 120, "n_towers": 30, "n_classes": 6, "n_behaviors": 4, "rank": 2,
            "mccs_per_behavior": 5, "transactions_per_user": 30},
  "lda": {"topics": 4, "iterations": 150, "infer_iterations": 60},
  "geo": {"classes": 6, "iterations": 150},
  "cmf": {"rank": 2, "rank_grid": [2, 3], "folds": 3, "max_iter": 100},
  "baselines": {"folds": 3, "lambdas": [0.01, 1.0]}
}"#;

fn lifestyles(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifestyles"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

/// `(path, sha256)` pairs of a manifest's inputs and outputs.
fn manifest(out: &Path, stage: &str) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let text = std::fs::read_to_string(out.join(stage).join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let pairs = |key: &str| {
        v[key]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
            .collect()
    };
    (pairs("inputs"), pairs("outputs"))
}

const STAGES: [&str; 10] = [
    "synth",
    "ingest",
    "lda-shopping",
    "towers",
    "features",
    "cmf-fit",
    "cmf-cv",
    "compare-views",
    "baselines",
    "report",
];

#[test]
fn full_pipeline_exits_zero_and_manifests_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for stage in STAGES {
        let o = lifestyles(&[stage, "--top-k", "20"], &config, &out);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut produced: HashMap<String, String> = HashMap::new();
    for stage in STAGES {
        let (inputs, outputs) = manifest(&out, stage);
        for (path, hash) in &inputs {
            assert_eq!(produced.get(path), Some(hash), "{stage} input {path}");
        }
        assert!(!outputs.is_empty());
        produced.extend(outputs);
    }

    let table = std::fs::read_to_string(out.join("report/behaviors_top.csv")).unwrap();
    let mut per_behavior: HashMap<String, usize> = HashMap::new();
    for line in table.lines().skip(1) {
        *per_behavior.entry(line.split(',').next().unwrap().to_string()).or_default() += 1;
    }
    assert_eq!(per_behavior.len(), 4);
    assert!(per_behavior.values().all(|&n| n == 20), "{per_behavior:?}");
}

#[test]
fn cv_without_features_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = lifestyles(&["cmf-cv"], &config, &dir.path().join("out"));
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`features`"), "{err}");
}

#[test]
fn invalid_config_lists_fields_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"cmf": {"rank": 0, "tol": -1}, "lda": {"beta": 0}}"#);
    let o = lifestyles(&["synth"], &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["cmf.rank", "cmf.tol", "lda.beta"] {
        assert!(err.contains(field), "{field}: {err}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_lifestyles")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_lifestyles")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn seed_flag_changes_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(lifestyles(&["synth"], &config, &a).status.success());
    assert!(lifestyles(&["synth", "--seed", "6"], &config, &b).status.success());
    let read = |p: &Path| std::fs::read(p.join("synth/cdr.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}
