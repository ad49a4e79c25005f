use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "schema_version": 1,
  "benchmark": {"tasks": 2, "n_train": 24, "n_test": 12},
  "training": {"epochs_per_task": 1}
}"#;

fn cmml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmml")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_every_artifact_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = cmml(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["result.json", "matrix.csv", "oracle_matrix.csv", "routing_log.json", "keys.json", "checkpoint/manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["seed"], 3);

    let eval = dir.path().join("eval.json");
    let o = cmml(&["eval", s(&out.join("checkpoint")), "--config", s(&cfg), "--seed", "3", "--out", s(&eval)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval).unwrap()).unwrap();
    assert_eq!(e["agnostic"].as_array().unwrap().len(), 2);

    let o = cmml(&["eval", s(&out.join("checkpoint")), "--config", s(&cfg), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(1));

    let o = cmml(&["metrics", s(&out.join("matrix.csv"))]);
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["ap"].is_number());
}

#[test]
fn repeated_train_gives_identical_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        let o = cmml(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0));
        fs::read(out.join("matrix.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn oracle_flag_switches_headline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = cmml(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--oracle-task-id"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("oracle AP"));
}

#[test]
fn generate_writes_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = cmml(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("benchmark.json")).unwrap();
    assert!(cmml_core::bench::Benchmark::from_json(&text).is_ok());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = dir.path().join("bad.json");
    fs::write(&bad_key, r#"{"schema_version": 1, "training": {"epochz": 2}}"#).unwrap();
    let out = s(dir.path());
    for args in [
        vec!["train", "--config", s(&bad_key), "--out", out],
        vec!["train", "--config", "/nonexistent/config.json", "--out", out],
        vec!["ablate", "--config", s(&bad_key), "--out", out],
    ] {
        let o = cmml(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    }
    let o = cmml(&["train", "--config", s(&bad_key), "--out", out]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("training.epochz"));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    fs::write(
        &cfg,
        r#"{"schema_version": 1,
            "benchmark": {"tasks": 1, "n_train": 8, "n_test": 4},
            "optimizer": {"base_lr": 1e300},
            "training": {"epochs_per_task": 3}}"#,
    )
    .unwrap();
    let o = cmml(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn metrics_rejects_malformed_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    fs::write(&p, "task,after_1\n1,7\n").unwrap();
    let o = cmml(&["metrics", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
}
