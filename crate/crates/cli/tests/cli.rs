use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dspal::sim::{generate_dataset, DgpSpec, OutcomeKind};

fn dspal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dspal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a simulated dataset as `x1..xp, t1, t2, y`.
fn write_sim_csv(dir: &Path, n: usize, p: usize, seed: u64) -> PathBuf {
    let sim = generate_dataset(&DgpSpec::new(n, p, OutcomeKind::Linear, seed).unwrap()).unwrap();
    let d = &sim.data;
    let mut text = String::new();
    let header: Vec<String> = (1..=p).map(|j| format!("x{j}")).chain(["t1".into(), "t2".into(), "y".into()]).collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for i in 0..n {
        let mut row: Vec<String> = (0..p).map(|j| d.x()[(i, j)].to_string()).collect();
        row.push(d.t()[(i, 0)].to_string());
        row.push(d.t()[(i, 1)].to_string());
        row.push(d.y()[i].to_string());
        writeln!(text, "{}", row.join(",")).unwrap();
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_treatment_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sim_csv(dir.path(), 40, 16, 1);
    let out = dspal(&["analyze", "--csv", csv.to_str().unwrap(), "--treatments", "t1,dose", "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("`dose` not found"), "{}", stderr(&out));
}

#[test]
fn dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sim_csv(dir.path(), 300, 20, 2);
    let out_dir = dir.path().join("out");
    let out = dspal(&[
        "analyze", "--csv", csv.to_str().unwrap(), "--treatments", "t1,t2", "--outcome", "y", "--dry-run", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resolved["k"], 20, "K = min(⌊300/ln 300⌋, p)");
    assert_eq!(resolved["d"], 20);
    let grid = resolved["lambda_grid"].as_array().unwrap();
    assert_eq!(grid.len(), 6);
    assert!((grid[0]["gamma"].as_f64().unwrap() - 4.4).abs() < 1e-12);
    assert!(!out_dir.exists(), "dry run writes nothing");
}

#[test]
fn bad_flags_and_config_are_config_errors() {
    let out = dspal(&["simulate", "--reps", "many"]);
    assert_eq!(out.status.code(), Some(1));
    let out = dspal(&["simulate", "--outcome", "quartic"]);
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d = 20\nlambda_exponents = 1, -2\n").unwrap();
    let out = dspal(&["simulate", "--reps", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(dspal(&["--help"]).status.success());
}

#[test]
fn numerical_failures_name_the_stage_and_leave_no_report() {
    let dir = tempfile::tempdir().unwrap();
    // Second treatment is an exact multiple of the first.
    let mut text = String::from("x1,x2,t1,t2,y\n");
    for i in 0..30 {
        let v = i as f64;
        writeln!(text, "{},{},{},{},{}", (v * 0.37).sin(), (v * 1.3).cos(), v, 2.0 * v, v * 0.5).unwrap();
    }
    let csv = dir.path().join("collinear.csv");
    std::fs::write(&csv, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = dspal(&[
        "analyze", "--csv", csv.to_str().unwrap(), "--treatments", "t1,t2", "--outcome", "y", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("independence screening"), "{}", stderr(&out));
    assert!(!out_dir.join("report.json").exists());
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = dspal(&[
            "simulate", "--n", "300", "--p", "100", "--reps", "5", "--seed", "7", "--out", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        (
            std::fs::read(out_dir.join("sim_report.json")).unwrap(),
            std::fs::read(out_dir.join("replicates.csv")).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    assert!(a == b, "outputs differ between identical runs");
    let report: serde_json::Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["n_reps"], 5);
    assert!(report["methods"][0]["mean_bias"].is_array());
    let csv = String::from_utf8(a.1).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
}

#[test]
fn nonlinear_report_has_effect_rmse_not_bias() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sim");
    let out = dspal(&[
        "simulate", "--n", "200", "--p", "30", "--reps", "2", "--outcome", "nonlinear", "--methods", "dspal", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("sim_report.json")).unwrap()).unwrap();
    let m = &report["methods"][0];
    assert!(m["mean_effect_rmse"].as_f64().unwrap() > 0.0);
    assert!(m.get("mean_bias").is_none() && m.get("rmse").is_none());
}

#[test]
fn analyze_recovers_targets_and_effects() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sim_csv(dir.path(), 300, 100, 11);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "n_boot = 100\nseed = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = dspal(&[
        "analyze", "--csv", csv.to_str().unwrap(), "--treatments", "t1,t2", "--outcome", "y", "--config",
        cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["resolved_config"]["k"], 52);
    let selected: Vec<&str> = report["selected"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for j in 1..=10 {
        assert!(selected.contains(&format!("x{j}").as_str()), "x{j} missing from {selected:?}");
    }
    let covs = report["covariates"].as_array().unwrap();
    assert!(covs[0]["canonical_corr"].is_number() && covs[0]["gcm"].is_number());
    for term in &report["effect"].as_array().unwrap()[1..] {
        let (lo, hi) = (term["ci_lower"].as_f64().unwrap(), term["ci_upper"].as_f64().unwrap());
        assert!(lo <= 1.0 && 1.0 <= hi, "{term}");
    }
    let log = std::fs::read_to_string(out_dir.join("stages.log")).unwrap();
    assert!(log.lines().count() >= 7, "{log}");
}
