use std::fs;
use std::path::Path;

use poisson_tori::cli::{run_args, sha256_hex};
use poisson_tori::systems::builtin;
use serde_json::Value;

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    let out = dir.to_str().unwrap();
    let mut all = args.to_vec();
    all.extend(["--out", out]);
    run_args(&all)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_builtins() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["validate", "--builtin", "so3_rigid_body"]), 0);
    assert_eq!(run_in(dir.path(), &["validate", "--builtin", "cjl_counterexample"]), 0);
    let report = json(&dir.path().join("validate_report.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["jacobi"]["passed"], true);
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dimension\": 2,").unwrap();
    assert_eq!(run_in(dir.path(), &["validate", "--input", bad.to_str().unwrap()]), 2);
    assert_eq!(run_in(dir.path(), &["validate", "--builtin", "no_such_system"]), 2);
    assert_eq!(run_in(dir.path(), &["periods", "--builtin", "harmonic1d", "--seed", "1,0,0"]), 2);
    assert_eq!(run_args(&["periods"]), 2);
    // the manifest is written even for input errors
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["exit_code"], 2);
}

#[test]
fn document_input_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let doc = builtin("harmonic1d").unwrap().to_json();
    let path = dir.path().join("harmonic.json");
    fs::write(&path, &doc).unwrap();
    assert_eq!(run_in(dir.path(), &["validate", "--input", path.to_str().unwrap()]), 0);
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["input_sha256"], sha256_hex(doc.as_bytes()));
    assert_eq!(manifest["command"], "validate");
    assert!(manifest["stages"].as_array().unwrap().iter().all(|s| s["outcome"] == "ok"));
}

#[test]
fn periods_tables() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["periods", "--builtin", "harmonic1d", "--grid", "11"]), 0);
    let csv = fs::read_to_string(dir.path().join("lattice.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0], "c_H,lambda_1_1,defect,status");
    for row in &rows[1..] {
        let lambda: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((lambda - 2.0 * std::f64::consts::PI).abs() < 1e-8, "{row}");
    }

    let other = tempfile::tempdir().unwrap();
    assert_eq!(run_in(other.path(), &["periods", "--builtin", "unitfreq1d"]), 0);
    let csv = fs::read_to_string(other.path().join("lattice.csv")).unwrap();
    let lambda: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((lambda - 1.0).abs() < 1e-10);
}

#[test]
fn non_compact_fibers_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["periods", "--builtin", "cjl_counterexample"]), 1);
    let report = json(&dir.path().join("periods_report.json"));
    assert!(report["diagnostic"].as_str().unwrap().contains("non-compact"));
    assert!(!dir.path().join("lattice.csv").exists());
}

#[test]
fn identical_runs_give_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        assert_eq!(run_in(dir.path(), &["chart", "--builtin", "harmonic1d", "--samples", "8"]), 0);
    }
    for name in ["lattice.csv", "chart.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn charts_pass_their_checks() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["chart", "--builtin", "oscillator2d", "--straighten", "--samples", "10"]), 0);
    let report = json(&dir.path().join("chart_report.json"));
    assert!(report["canonical"]["straightened"].as_bool().unwrap());
    assert!(report["straighten"]["after"].as_f64().unwrap() < 1e-4);

    let nc = tempfile::tempdir().unwrap();
    assert_eq!(run_in(nc.path(), &["chart", "--builtin", "isotropic2d_nc", "--samples", "10"]), 0);
    let report = json(&nc.path().join("chart_report.json"));
    let theta_z = report["canonical"]["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["pair"] == "theta_z")
        .unwrap()
        .clone();
    assert_eq!(theta_z["enforced"], false);
}

#[test]
fn tight_thresholds_fail_the_chart() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_in(dir.path(), &["chart", "--builtin", "harmonic1d", "--samples", "4", "--theta-p-tol", "1e-16"]);
    assert_eq!(code, 1);
}

#[test]
fn flow_and_actions_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["flow", "--builtin", "harmonic1d", "--time", "6.283185307179586", "--steps", "8"]), 0);
    let csv = fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((last[1] - 1.0).abs() < 1e-8 && last[2].abs() < 1e-8);

    assert_eq!(run_in(dir.path(), &["actions", "--builtin", "unitfreq1d", "--grid", "5"]), 0);
    let csv = fs::read_to_string(dir.path().join("actions.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        let h0 = std::f64::consts::PI;
        assert!((v[1] - (v[0] - h0)).abs() < 1e-8, "{row}");
    }
}
