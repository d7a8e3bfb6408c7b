use std::path::{Path, PathBuf};

use torus_ensemble::experiment::{parse_config, parse_config_str, run, run_experiment, DEGENERATE_STATUS};

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tens-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

const UNWEIGHTED_BUMP: &str = r#"
[model]
reference = "unweighted"
lower = [1.0]
upper = [2.0]
band = 4

[ensemble]
profile = { kind = "bump" }
angle_density = { mean = 1.0, terms = [{ n = [1], cos = 0.3, sin = -0.2 }] }
observable = { angle = { terms = [{ n = [1], cos = 1.0 }] } }
mode_band = 4

[grid]
log = { start = 1.0, stop = 1000.0, count = 32 }
mc_samples = 20000

[audit]
tau = 1.0
"#;

#[test]
fn unweighted_bump_equidistributes() {
    let report = run(&parse_config_str(UNWEIGHTED_BUMP).unwrap()).unwrap();
    assert_eq!(report.exit_code, 0, "{}", report.status);
    let slope = report.fitted_slope.unwrap();
    assert!(slope <= -0.9, "slope {slope}");
}

#[test]
fn sys_a_pipeline_rate() {
    let mut config = parse_config(&config_path("sys_a.toml")).unwrap();
    config.mc_samples = 20_000;
    let report = run(&config).unwrap();
    assert_eq!(report.exit_code, 0, "{}", report.status);
    let slope = report.fitted_slope.unwrap();
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
    assert!(report.envelope_points >= 8);
    assert!(report.audit_stamps.conjugacy.is_some());
    assert!(report.t_grid.windows(2).all(|w| w[0] < w[1]));
    assert!(report.diffs.iter().all(|d| *d >= 0.0));
    assert!(report.estimator_checks.iter().all(|c| c.sigmas <= 5.0));
    assert!(report.mode_audits.iter().all(|m| m.ratio <= 10.0));
}

#[test]
fn angle_independent_observable_is_degenerate() {
    let text = r#"
[model]
reference = "sys-a"

[ensemble]
observable = { action = [{ coeff = 1.0, powers = [2] }] }

[grid]
times = [1.0, 10.0, 100.0]
mc_samples = 2000
"#;
    let report = run(&parse_config_str(text).unwrap()).unwrap();
    assert_eq!(report.status, DEGENERATE_STATUS);
    assert_eq!(report.exit_code, 0);
    assert!(report.fitted_slope.is_none());
    assert!(report.diffs.iter().zip(&report.stderrs).all(|(d, s)| d <= s));
}

#[test]
fn resonant_box_fails_the_audit() {
    let text = r#"
[model]
reference = "unweighted"
lower = [1.0, 1.0]
upper = [3.0, 3.0]

[ensemble]
observable = { angle = { terms = [{ n = [1, 0], cos = 1.0 }] } }

[audit]
grid_n = 2
"#;
    let report = run(&parse_config_str(text).unwrap()).unwrap();
    assert_eq!(report.exit_code, 2, "{}", report.status);
    assert!(report.audit_stamps.failure.is_some());
    assert!(report.diffs.is_empty());
}

#[test]
fn runs_are_bit_identical() {
    let path = config_path("sys_a.toml");
    let first = scratch_dir("det-1");
    let second = scratch_dir("det-2");
    let a = run_experiment(&path, &first).unwrap();
    let b = run_experiment(&path, &second).unwrap();
    assert_eq!(a.csv(), b.csv());
    let csv_a = std::fs::read(first.join("results.csv")).unwrap();
    let csv_b = std::fs::read(second.join("results.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(first.join("report.json")).unwrap()).unwrap();
    assert!(json["audit_stamps"]["resonance"].is_object());
    assert!(json["fitted_logC"].is_number());
    assert_eq!(json["config"]["ensemble"]["samples"], 100000);
    let _ = std::fs::remove_dir_all(&first);
    let _ = std::fs::remove_dir_all(&second);
}

#[test]
fn missing_file_is_an_error() {
    assert!(parse_config(Path::new("/nonexistent/run.toml")).is_err());
}
