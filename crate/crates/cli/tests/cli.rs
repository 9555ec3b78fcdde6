use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specshare"))
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn instance(dir: &Path, name: &str, cross: f64) -> PathBuf {
    write(
        dir,
        name,
        &format!(
            r#"{{"symmetric": {{"users": 2, "cross": {cross}}}, "noise": 0.05, "power_grid": {{"max": 1000.0}}, "min_rates": 1.0, "discount": 0.9}}"#
        ),
    )
}

fn run(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn its_reports_the_symmetric_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = instance(dir.path(), "two_user.json", 0.5);
    let out = run(&["its", "--precision", "1e-9"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    for r in v["r_star"].as_array().unwrap() {
        assert!((r.as_f64().unwrap() - 2.0).abs() < 1e-8);
    }
    for p in v["p_star"].as_array().unwrap() {
        assert!((p.as_f64().unwrap() - 0.15).abs() < 1e-8);
    }
}

#[test]
fn stationary_is_infeasible_at_unit_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = instance(dir.path(), "alpha_1.json", 1.0);
    let out = run(&["stationary"], Some(&cfg));
    assert_eq!(out.status.code(), Some(1));
    let cfg = instance(dir.path(), "alpha_half.json", 0.5);
    let out = run(&["stationary"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn oracle_accepts_the_irregular_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = instance(dir.path(), "sym.json", 0.5);
    let out = run(&["oracle", "--horizon", "10", "--expect", "1221122112"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["expected"]["optimal"], Value::Bool(true));
    assert_eq!(v["evaluated"], 1024);
    let out = run(&["oracle", "--horizon", "10", "--expect", "1111111111"], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(run(&["its", "--bogus"], None).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"symmetric": {"users": 2, "cross": 0.5}, "colour": 1}"#);
    assert_eq!(run(&["its"], Some(&bad)).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["its"], Some(&missing)).status.code(), Some(2));
}

#[test]
fn check_suite_passes() {
    let out = run(&["check"], None);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 10);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn seeded_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = instance(dir.path(), "sym.json", 0.5);
    let a = run(&["ldf", "--seed", "9", "--horizon", "50"], Some(&cfg));
    let b = run(&["ldf", "--seed", "9", "--horizon", "50"], Some(&cfg));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 50);
    let a = run(&["dynamic", "--seed", "3", "--horizon", "300"], None);
    let b = run(&["dynamic", "--seed", "3", "--horizon", "300"], None);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn compare_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.json",
        r#"{"scenario": "user-sweep", "grid": [2, 3], "trials": 8, "seed": 5, "horizon": 100}"#,
    );
    let out_path = dir.path().join("sweep.csv");
    let out = bin()
        .args(["compare", "--threads", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert!(csv.starts_with("scenario,point,parameter,value,policy,metric,mean,stderr,trials"));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["trials"], 8);
}
