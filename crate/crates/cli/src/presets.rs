//! Built-in desk-scale figure reproductions.
//!
//! Presets shrink widths, step budgets and seed counts so they run in
//! minutes on a laptop; depth, γ, target rank and cost family are kept.

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Preset {
    pub name: &'static str,
    pub about: &'static str,
    /// How the preset departs from the full-size experiment.
    pub scaling: &'static str,
    pub json: &'static str,
}

impl Preset {
    pub fn config(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_json(self.json)
    }
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "figure1",
        about: "saddle-to-saddle training on 10x10 rank-3 matrix completion, L=4, gamma=2",
        scaling: "w 100->20; singular values [20,10,4], 70% observed, eta 0.01 for 3e5 steps",
        json: r#"{
  "kind": "figure1",
  "seed": 11,
  "shape": [10, 20, 20, 20, 10],
  "gamma": 2.0,
  "task": {"type": "low_rank_mc", "n_out": 10, "n_in": 10, "singular_values": [20.0, 10.0, 4.0], "fraction": 0.7, "seed": 11},
  "flow": {"step_size": 0.01, "max_steps": 300000, "snapshot_every": 100, "rank_tol": 0.1},
  "figure1": {"expect_plateaus": 3, "expect_ranks": [1, 2, 3], "max_train_loss": 1e-6, "max_test_loss": 1e-2}
}"#,
    },
    Preset {
        name: "figure2",
        about: "NTK / mean-field / saddle-to-saddle loss curves, teacher 10*diag(1..5) on 100 Gaussian samples, L=4",
        scaling: "widths {10,100,1000}->{10,20}; 10->3 seeds; eta 1e-4 for 5e4 steps unchanged",
        json: r#"{
  "kind": "figure3",
  "seed": 2,
  "shape": [5, 10, 10, 10, 5],
  "task": {"type": "teacher_regression", "teacher": [10.0, 20.0, 30.0, 40.0, 50.0], "samples": 100, "seed": 2},
  "flow": {"step_size": 0.0001, "max_steps": 50000, "snapshot_every": 100, "rank_tol": 0.1},
  "figure3": {"widths": [10, 20], "gammas": [0.75, 1.0, 1.5], "trials": 3, "eta0": 0.0001, "scale_eta": false}
}"#,
    },
    Preset {
        name: "figure3",
        about: "test error and rank against gamma, 30x30 rank-1 completion from 20% of entries, L=4",
        scaling: "widths {20,50}; 7->3 seeds; eta0 0.05 rescaled for gamma<=1, 2e4 steps unchanged",
        json: r#"{
  "kind": "figure3",
  "seed": 3,
  "shape": [30, 20, 20, 20, 30],
  "task": {"type": "gaussian_factor_mc", "n_out": 30, "n_in": 30, "rank": 1, "fraction": 0.2, "seed": 3},
  "flow": {"step_size": 0.05, "max_steps": 20000, "snapshot_every": 200, "rank_tol": 0.1},
  "figure3": {"widths": [20, 50], "gammas": [0.5, 0.75, 1.0, 1.25, 1.5, 2.0], "trials": 3, "eta0": 0.05, "check_trend": true}
}"#,
    },
    Preset {
        name: "figure4_deep_saddle",
        about: "noisy rank-3 10x10 teacher, L=4, sigma=1/w (gamma=2)",
        scaling: "w 100->20; 1.5e6->2e5 steps at eta 1e-3",
        json: r#"{
  "kind": "run",
  "seed": 4,
  "shape": [10, 20, 20, 20, 10],
  "gamma": 2.0,
  "task": {"type": "noisy_low_rank_teacher", "n": 10, "rank": 3, "noise": 0.2, "samples": 100, "test_samples": 1000, "seed": 4},
  "flow": {"step_size": 0.001, "max_steps": 200000, "snapshot_every": 200, "rank_tol": 1e-4},
  "run": {}
}"#,
    },
    Preset {
        name: "figure4_deep_ntk",
        about: "noisy rank-3 10x10 teacher, L=4, sigma=w^(-3/8) (gamma=3/4)",
        scaling: "w 100->20; 1.5e6->2e5 steps at eta 1e-3",
        json: r#"{
  "kind": "run",
  "seed": 4,
  "shape": [10, 20, 20, 20, 10],
  "gamma": 0.75,
  "task": {"type": "noisy_low_rank_teacher", "n": 10, "rank": 3, "noise": 0.2, "samples": 100, "test_samples": 1000, "seed": 4},
  "flow": {"step_size": 0.001, "max_steps": 200000, "snapshot_every": 200, "rank_tol": 1e-4},
  "run": {}
}"#,
    },
    Preset {
        name: "figure4_shallow_saddle",
        about: "noisy rank-3 10x10 teacher, L=2, sigma=w^-2 (gamma=4)",
        scaling: "w 50->20; 1e5 steps at eta 1e-3 unchanged",
        json: r#"{
  "kind": "run",
  "seed": 4,
  "shape": [10, 20, 10],
  "gamma": 4.0,
  "task": {"type": "noisy_low_rank_teacher", "n": 10, "rank": 3, "noise": 0.2, "samples": 100, "test_samples": 1000, "seed": 4},
  "flow": {"step_size": 0.001, "max_steps": 100000, "snapshot_every": 100, "rank_tol": 1e-4},
  "run": {}
}"#,
    },
    Preset {
        name: "figure4_shallow_ntk",
        about: "noisy rank-3 10x10 teacher, L=2, sigma=w^(-1/4) (gamma=1/2)",
        scaling: "w 50->20; 1e5 steps at eta 1e-3 unchanged",
        json: r#"{
  "kind": "run",
  "seed": 4,
  "shape": [10, 20, 10],
  "gamma": 0.5,
  "task": {"type": "noisy_low_rank_teacher", "n": 10, "rank": 3, "noise": 0.2, "samples": 100, "test_samples": 1000, "seed": 4},
  "flow": {"step_size": 0.001, "max_steps": 100000, "snapshot_every": 100, "rank_tol": 1e-4},
  "run": {}
}"#,
    },
    Preset {
        name: "distance_scaling",
        about: "constructive saddle and minimum distances against width for gamma in {0.5, 1, 1.5}, L=3",
        scaling: "widths 8..128, 7 seeds, 3x3 target with singular values [4,2,1]",
        json: r#"{
  "kind": "regime_sweep",
  "seed": 0,
  "shape": [3, 8, 8, 3],
  "task": {"type": "low_rank_mc", "n_out": 3, "n_in": 3, "singular_values": [4.0, 2.0, 1.0], "fraction": 1.0, "seed": 8},
  "regime_sweep": {"widths": [8, 16, 32, 64, 128], "gammas": [0.5, 1.0, 1.5], "trials": 7, "slope_rel_tol": 0.15}
}"#,
    },
];

pub fn find(name: &str) -> Result<&'static Preset, CliError> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| CliError::UnknownPreset(name.to_string()))
}

/// Human-readable preset listing.
pub fn list_presets() -> String {
    let mut out = String::new();
    for p in PRESETS {
        out.push_str(&format!("{}\n    {}\n    desk scaling: {}\n", p.name, p.about, p.scaling));
    }
    out
}
