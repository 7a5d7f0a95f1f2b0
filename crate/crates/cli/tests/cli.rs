use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn spryfed(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spryfed"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{"seed": 1, "method": "spry", "rounds": 3, "dataset.n": 120, "dataset.eval_n": 40,
    "dataset.dim": 6, "partition.clients": 6, "partition.alpha": 0.5}"#;

#[test]
fn missing_method_names_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"seed": 1, "rounds": 3}"#);
    let out = spryfed(&["run"], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("method"));
}

#[test]
fn foreign_method_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"method": "spry", "mezo.sigma": 0.01}"#);
    let out = spryfed(&["run"], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mezo.sigma"));
}

#[test]
fn zero_rounds_writes_a_header_only_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"method": "fedavg", "rounds": 0, "dataset.n": 100, "partition.clients": 5}"#);
    let o = dir.path().join("o");
    let out = spryfed(&["run"], &cfg, &o);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(o.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines, vec!["round,method,acc_gen,acc_pers,loss,grad_norm_proxy"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(spryfed(&["run"], &cfg, &a).status.success());
    assert!(spryfed(&["run"], &cfg, &b).status.success());
    for f in ["trace.csv", "summary.json", "checkpoint.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f);
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# spryfed schema=1 config_hash="));
    assert_eq!(trace.lines().count(), 2 + 3);
}

#[test]
fn seed_flag_overrides_and_is_echoed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(spryfed(&["run", "--seed", "9"], &cfg, &a).status.success());
    assert!(spryfed(&["run"], &cfg, &b).status.success());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_ne!(std::fs::read(a.join("trace.csv")).unwrap(), std::fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn partition_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(spryfed(&["partition"], &cfg, &a).status.success());
    assert!(spryfed(&["partition"], &cfg, &b).status.success());
    for f in ["partition.json", "bias.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let bias = std::fs::read_to_string(a.join("bias.csv")).unwrap();
    assert_eq!(bias.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
}

#[test]
fn cost_table_has_worked_values() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "c.json",
        r#"{"method": "spry", "cost.m": [4], "cost.l": [4], "cost.w_l": [10], "cost.c": 7, "cost.v": 2,
            "cost.k": [20], "cost.modes": ["per_epoch"], "cost.methods": ["spry", "fedavg", "baffle_plus"]}"#,
    );
    let o = dir.path().join("o");
    assert!(spryfed(&["cost"], &cfg, &o).status.success());
    let csv = std::fs::read_to_string(o.join("cost.csv")).unwrap();
    let client: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("method"))
        .map(|l| l.split(',').nth(10).unwrap())
        .collect();
    assert_eq!(client, vec!["58", "84", "1920"]);
}

#[test]
fn validate_echoes_the_seed_and_rejects_unknown_suites() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"seed": 17, "method": "spry", "validate.samples": 10000}"#);
    let o = dir.path().join("o");
    let out = spryfed(&["validate", "--suite", "unbiasedness"], &cfg, &o);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(o.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 17);
    assert_eq!(report["reports"][0]["seed"], 17);
    assert_eq!(report["suite"], "unbiasedness");

    let bad = spryfed(&["validate", "--suite", "nope"], &cfg, &o);
    assert_eq!(bad.status.code(), Some(2));
}
