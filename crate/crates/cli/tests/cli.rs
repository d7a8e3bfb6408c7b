use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tens")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn audit_prints_json() {
    let out = tens(&["audit", "--system", "sys-a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json["lambda_eff"], 1.0);
    assert!(json["alpha_eff"].as_f64().unwrap() > 0.0);
}

#[test]
fn dump_series_writes_coefficients() {
    let out = tens(&["dump-series", "--system", "sys-a", "--band", "4", "--field", "b"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let row = text.lines().find(|l| l.starts_with("1,")).expect("mode 1 row");
    let re: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((re - 0.25).abs() < 1e-12);
    let missing = tens(&["dump-series", "--system", "sys-a", "--field", "v"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn solve_v_reports_residual() {
    let out = tens(&["solve-v", "--system", "sys-b", "--action", "1.0,1.618"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("# residual_sup"));
    assert!(text.lines().any(|l| l.starts_with("1,0,")));
}

#[test]
fn trajectory_and_conjugacy_audit() {
    let out = tens(&["trajectory", "--system", "sys-a", "--action", "1.5", "--theta", "0.3", "--times", "log:1:100:5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 5);
    let out = tens(&["conjugacy-audit", "--system", "sys-a", "--grid-n", "2", "--samples", "8"]);
    assert!(out.status.success());
    assert!(serde_json::from_str::<serde_json::Value>(&stdout(&out)).is_ok());
}

#[test]
fn evolve_prints_both_estimators() {
    let cfg = config("sys_a.toml");
    let out = tens(&["evolve", "--config", cfg.to_str().unwrap(), "--times", "0,5", "--samples", "4000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,mc,mc_stderr,quad,quad_error"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn bad_input_exits_nonzero() {
    assert_eq!(tens(&["audit", "--system", "sys-z"]).status.code(), Some(1));
    assert_eq!(tens(&["run", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    assert!(!tens(&["frobnicate"]).status.success());
}

#[test]
fn run_writes_outputs() {
    let dir = std::env::temp_dir().join(format!("tens-cli-{}", std::process::id()));
    let cfg = config("sys_a.toml");
    let out = tens(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("t,diff,stderr,envelope\n"));
    assert_eq!(csv.lines().count(), 33);
    assert!(dir.join("report.json").exists());
    let _ = std::fs::remove_dir_all(&dir);
}
