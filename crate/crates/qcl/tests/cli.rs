//! End-to-end tests of the `qcl` binary.

mod common;

use std::process::{Command, Output};

use serde_json::Value;

fn qcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcl")).args(args).output().expect("qcl runs")
}

fn example(name: &str) -> String {
    common::example_path(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn every_example_checks() {
    for name in common::example_names() {
        let o = qcl(&["check", &example(&name)]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
    }
}

#[test]
fn check_prints_teleportation_type() {
    let o = qcl(&["check", &example("tele.qcl")]);
    assert!(stdout(&o).lines().any(|l| l == "tele : qbit -o qbit"), "{}", stdout(&o));
}

#[test]
fn normalize_bell_state() {
    let o = qcl(&["normalize", &example("bell.qcl"), "-e", "CNOT((Had ket0) (x) ket0)"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "[0.7071]*|00> + [0.7071]*|11>");
}

#[test]
fn run_measurement_json() {
    let o = qcl(&["run", &example("meas_third.qcl"), "--mode", "exhaustive"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["version"], 1);
    let mut ps: Vec<f64> = v["branches"].as_array().unwrap().iter().map(|b| b["probability"].as_f64().unwrap()).collect();
    ps.sort_by(f64::total_cmp);
    assert!((ps[0] - 1.0 / 3.0).abs() < 1e-9 && (ps[1] - 2.0 / 3.0).abs() < 1e-9, "{ps:?}");
}

#[test]
fn sampling_is_reproducible() {
    let args = ["run", &example("walk3.qcl"), "--mode", "sample", "--seed", "7", "--format", "text"];
    let a = qcl(&args);
    let b = qcl(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("1.000000"));
}

#[test]
fn run_with_trace_and_expression() {
    let o = qcl(&["run", &example("bell_m.qcl"), "-e", "bell_m (pure(ket0)) (pure(ket0))", "--trace", "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(!v["trace"].as_array().unwrap().is_empty());
    assert_eq!(v["type"], "bit (x) bit");
}

#[test]
fn denote_kinds() {
    let o = qcl(&["denote", &example("bell.qcl"), "-e", "Had"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "unitary");
    assert_eq!(v["matrix"]["rows"], 2);
    let o = qcl(&["denote", &example("bell.qcl"), "-e", "bell"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "state");
    assert_eq!(v["matrix"]["rows"], 4);
    let o = qcl(&["denote", &example("bell.qcl"), "-e", "bell_s"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["kind"], "program");
    assert_eq!(v["blocks"], serde_json::json!([4]));
}

#[test]
fn denote_reports_truncation() {
    let o = qcl(&["denote", &example("walk.qcl"), "-e", "u1", "--trunc", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(!v["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn truncation_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_qcl"))
        .args(["denote", &example("walk.qcl"), "-e", "u2"])
        .env("QCL_TRUNC", "12")
        .output()
        .unwrap();
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["qnat_dim"], 12);
}

#[test]
fn verify_examples() {
    for name in ["bell.qcl", "tele.qcl", "walk.qcl"] {
        let o = qcl(&["verify", &example(name)]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}{}", stdout(&o), stderr(&o));
        assert!(!stdout(&o).contains("FAIL"));
        assert!(stdout(&o).contains("PASS adequacy"));
    }
}

#[test]
fn diagnostics_exit_one() {
    let dir = std::env::temp_dir().join(format!("qcl-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.qcl");
    std::fs::write(&bad, "def f = \\x:B(qbit). x (x) x;\n").unwrap();
    let o = qcl(&["check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[E0004]"), "{}", stderr(&o));
    std::fs::write(&bad, "state s = ket0 (x;\n").unwrap();
    let o = qcl(&["check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[E0017] 1:"), "{}", stderr(&o));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(qcl(&["run", &example("bell.qcl"), "--bogus"]).status.code(), Some(1));
    assert_eq!(qcl(&["check", "/nonexistent/file.qcl"]).status.code(), Some(1));
    assert_eq!(qcl(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_tolerance_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_qcl"))
        .args(["check", &example("bell.qcl")])
        .env("QCL_TOLERANCE", "-1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
