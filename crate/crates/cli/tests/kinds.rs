//! One small config per experiment kind, run in-process.

use dln_cli::presets::PRESETS;
use dln_cli::{execute, ExperimentConfig};

fn run_ok(text: &str) -> dln_cli::RunOutcome {
    let cfg = ExperimentConfig::from_json(text).unwrap();
    let out = execute(&cfg);
    assert!(out.error.is_none(), "{:?}", out.error);
    assert!(out.checks_passed(), "{:#?}", out.artifacts.checks);
    out
}

fn file_names(out: &dln_cli::RunOutcome) -> Vec<&str> {
    out.artifacts.files.iter().map(|(n, _)| n.as_str()).collect()
}

#[test]
fn every_preset_validates_and_round_trips() {
    for p in PRESETS {
        let cfg = p.config().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", p.name);
        assert!(!p.scaling.is_empty());
    }
}

#[test]
fn greedy_compares_with_flow() {
    let out = run_ok(
        r#"{
      "kind": "greedy", "seed": 13, "shape": [4, 8, 4],
      "task": {"type": "diagonal_regression", "diag": [3.0, 2.0, 0.0, 0.0]},
      "flow": {"step_size": 0.01, "max_steps": 60000, "snapshot_every": 20},
      "greedy": {"cfg_greedy": {"eps": 1e-3, "inner_steps": 50000, "lr": 0.01, "max_width": 4}, "compare_alpha": 1e-4}
    }"#,
    );
    assert_eq!(file_names(&out), ["trajectory.csv", "greedy_stages.csv"]);
    assert_eq!(out.artifacts.stats["greedy_rank_sequence"], serde_json::json!([1, 2]));
    let diff = out.artifacts.stats["comparison"]["relative_difference"].as_f64().unwrap();
    assert!(diff < 1e-2, "{diff}");
}

#[test]
fn greedy_past_max_width_is_an_error_with_stages() {
    let cfg = ExperimentConfig::from_json(
        r#"{
      "kind": "greedy", "shape": [3, 3, 3],
      "task": {"type": "diagonal_regression", "diag": [3.0, 2.0, 1.0]},
      "greedy": {"cfg_greedy": {"eps": 1e-3, "inner_steps": 20000, "lr": 0.01, "max_width": 1}}
    }"#,
    )
    .unwrap();
    let out = execute(&cfg);
    assert!(matches!(out.error, Some(dln_core::DlnError::MaxWidthExceeded(_))));
    assert_eq!(file_names(&out), ["greedy_stages.csv"]);
}

#[test]
fn escape_sweep_fits_the_log_rate() {
    let out = run_ok(
        r#"{
      "kind": "escape_sweep", "seed": 5, "shape": [2, 2, 2], "sigma": 1.0,
      "task": {"type": "diagonal_regression", "diag": [3.0, 0.3]},
      "flow": {"step_size": 0.001, "max_steps": 100000, "snapshot_every": 1000, "integrator": "rk4"},
      "escape_sweep": {"alphas": [1e-2, 1e-3, 1e-4, 1e-5], "r": 0.1, "slope_rel_tol": 0.05}
    }"#,
    );
    let slope = out.artifacts.stats["fit"]["slope"].as_f64().unwrap();
    assert!((slope - 1.0 / 3.0).abs() < 0.05 / 3.0, "{slope}");
}

#[test]
fn ntk_check_matches_expectation() {
    let out = run_ok(
        r#"{
      "kind": "ntk_check", "seed": 9, "shape": [3, 32, 32, 3], "gamma": 1.0,
      "task": {"type": "diagonal_regression", "diag": [1.0, 0.5, 0.2]},
      "flow": {"step_size": 0.01, "max_steps": 2000},
      "ntk_check": {"trials": 100, "train": true, "diag_rel_tol": 0.1}
    }"#,
    );
    assert!(out.artifacts.stats["ntk_relative_change"].as_f64().unwrap() > 0.0);
}

#[test]
fn refine_path_converges() {
    let out = run_ok(
        r#"{
      "kind": "refine_path", "shape": [2, 1, 2],
      "task": {"type": "diagonal_regression", "diag": [1.0, 0.4]},
      "refine_path": {"tol": 1e-12, "max_iter": 50}
    }"#,
    );
    assert_eq!(file_names(&out), ["homogeneous_path.csv", "refined_path.csv", "refinement.csv"]);
    assert!(out.artifacts.stats["flow_residual"].as_f64().unwrap() < 1e-4);
}

#[test]
fn regime_sweep_reports_both_fits() {
    let out = run_ok(
        r#"{
      "kind": "regime_sweep", "seed": 0, "shape": [3, 8, 8, 3],
      "task": {"type": "low_rank_mc", "n_out": 3, "n_in": 3, "singular_values": [4.0, 2.0, 1.0], "fraction": 1.0, "seed": 8},
      "regime_sweep": {"widths": [8, 16, 32, 64, 128], "gammas": [1.5], "trials": 7}
    }"#,
    );
    assert_eq!(out.artifacts.checks.len(), 2);
    assert_eq!(file_names(&out), ["distances.csv"]);
}
