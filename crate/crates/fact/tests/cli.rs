//! End-to-end invocations of the compiled binary: exit codes, output
//! formats, and manifest emission.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fact"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_preds(dir: &Path) -> PathBuf {
    let path = dir.join("preds.csv");
    let mut body = String::from("y,yhat,a\n");
    for i in 0..200u32 {
        let y = (i & 1) as u8;
        let a = ((i >> 1) & 1) as u8;
        let yhat = if i % 5 == 0 { 1 - y } else { y };
        body.push_str(&format!("{y},{yhat},{a}\n"));
    }
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn check_wellformed_exits_zero() {
    let o = run(&["check", "--defs", "CG(v0=.3,v1=.8),DP", "--marginals", "100,50,30,10"]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let body: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(body["compatible"], serde_json::Value::Bool(false));
}

#[test]
fn check_unknown_definition_exits_two() {
    let o = run(&["check", "--defs", "nonsense", "--marginals", "100,50,30,10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_two() {
    let o = run(&["check", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_one() {
    let o = run(&["tensor", "--pred", "/definitely/not/here.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tensor_json_on_stdout_report_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_preds(dir.path());
    let o = run(&["tensor", "--pred", preds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let body: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(body["counts"].as_array().unwrap().len(), 8);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn gaps_csv_has_per_constraint_rows() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_preds(dir.path());
    let o = run(&["gaps", "--defs", "EOd,DP", "--pred", preds.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("constraint,residual\n"));
    assert!(out.contains("DP,"));
    assert!(out.contains("aggregate,"));
}

#[test]
fn frontier_writes_csv_curve_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_preds(dir.path());
    let out_path = dir.path().join("curve.csv");
    let o = run(&[
        "frontier",
        "--defs",
        "EOd,DP",
        "--pred",
        preds.to_str().unwrap(),
        "--grid",
        "lambda:1e-2:1e2:4",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert!(csv.starts_with("epsilon,delta,error_rate,control_value,status,gap_norm\n"));
    assert_eq!(csv.lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("curve.csv.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["subcommand"], "frontier");
    assert!(manifest["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn inline_marginals_win_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_preds(dir.path());
    let o = run(&[
        "check",
        "--defs",
        "DP",
        "--pred",
        preds.to_str().unwrap(),
        "--marginals",
        "100,50,30,10",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"), "stderr: {}", stderr(&o));
}

#[test]
fn synth_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&p1, &p2] {
        let o = run(&["synth", "--variant", "U", "--n", "300", "--seed", "9", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn synth_rejects_bad_variant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.csv");
    let o = run(&["synth", "--variant", "Q", "--n", "10", "--out", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn postprocess_adds_yhat_post_column() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_preds(dir.path());
    let out_path = dir.path().join("repaired.csv");
    let o = run(&[
        "postprocess",
        "--pred",
        preds.to_str().unwrap(),
        "--defs",
        "EOd",
        "--out",
        out_path.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let body = std::fs::read_to_string(&out_path).unwrap();
    assert!(body.starts_with("y,yhat,a,yhat_post\n"));
    assert_eq!(body.lines().count(), 201);
    assert!(out_path.with_extension("csv.manifest.json").exists());
}

#[test]
fn mlafop_reports_per_definition_residuals() {
    let o = run(&[
        "mlafop",
        "--defs",
        "EOd,DP",
        "--lambdas",
        "10,5",
        "--marginals",
        "100,50,30,10",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let body: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(body["system_residuals"].as_array().unwrap().len(), 2);
}

#[test]
fn mlafop_weight_count_mismatch_exits_two() {
    let o = run(&["mlafop", "--defs", "EOd,DP", "--lambdas", "10", "--marginals", "100,50,30,10"]);
    assert_eq!(o.status.code(), Some(2));
}
