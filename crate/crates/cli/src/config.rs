//! Experiment configuration files.

use serde::{Deserialize, Serialize};

use dln_core::escape::GridSpec;
use dln_core::{rng, tasks};
use dln_core::{CostSpec, FlowConfig, GreedyConfig, Matrix, NetShape, Vector};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Run,
    Greedy,
    EscapeSweep,
    RegimeSweep,
    NtkCheck,
    RefinePath,
    Figure1,
    Figure3,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Run => "run",
            Kind::Greedy => "greedy",
            Kind::EscapeSweep => "escape_sweep",
            Kind::RegimeSweep => "regime_sweep",
            Kind::NtkCheck => "ntk_check",
            Kind::RefinePath => "refine_path",
            Kind::Figure1 => "figure1",
            Kind::Figure3 => "figure3",
        }
    }
}

/// Synthetic task generators, an alternative to spelling out `cost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Completion of `U diag(s) Vᵀ` with Haar `U`, `V`.
    LowRankMc {
        n_out: usize,
        n_in: usize,
        singular_values: Vec<f64>,
        fraction: f64,
        seed: u64,
    },
    /// Completion of a product of i.i.d. Gaussian factors.
    GaussianFactorMc {
        n_out: usize,
        n_in: usize,
        rank: usize,
        fraction: f64,
        seed: u64,
    },
    /// `X = I`, `Y = diag(d)`.
    DiagonalRegression { diag: Vec<f64> },
    /// MSE on standard Gaussian inputs labelled by `diag(teacher)`.
    TeacherRegression {
        teacher: Vec<f64>,
        samples: usize,
        seed: u64,
    },
    /// Teacher `W₀W₀ᵀ` with `W₀` of size `n × rank`, column `i` of
    /// variance `i`. Training labels come from the teacher plus i.i.d.
    /// `N(0, noise²)` entries; test labels from the clean teacher.
    NoisyLowRankTeacher {
        n: usize,
        rank: usize,
        noise: f64,
        samples: usize,
        test_samples: usize,
        seed: u64,
    },
}

impl TaskSpec {
    /// Training cost and, when the task has one, a held-out test cost.
    pub fn build(&self) -> dln_core::Result<(CostSpec, Option<CostSpec>)> {
        match self {
            TaskSpec::LowRankMc {
                n_out,
                n_in,
                singular_values,
                fraction,
                seed,
            } => Ok((tasks::low_rank_completion(*n_out, *n_in, singular_values, *fraction, *seed)?, None)),
            TaskSpec::GaussianFactorMc {
                n_out,
                n_in,
                rank,
                fraction,
                seed,
            } => Ok((tasks::gaussian_factor_completion(*n_out, *n_in, *rank, *fraction, *seed)?, None)),
            TaskSpec::DiagonalRegression { diag } => Ok((tasks::diagonal_regression(diag)?, None)),
            TaskSpec::TeacherRegression { teacher, samples, seed } => {
                let n = teacher.len();
                let mut r = rng::stream(*seed, 0x21);
                let x = rng::gaussian_matrix(&mut r, n, *samples, 1.0);
                let t = Matrix::from_diagonal(&Vector::from_row_slice(teacher));
                let y = &t * &x;
                Ok((CostSpec::mse(x, y)?, None))
            }
            TaskSpec::NoisyLowRankTeacher {
                n,
                rank,
                noise,
                samples,
                test_samples,
                seed,
            } => {
                let mut r = rng::stream(*seed, 0x22);
                let mut w0 = rng::gaussian_matrix(&mut r, *n, *rank, 1.0);
                for (i, mut col) in w0.column_iter_mut().enumerate() {
                    col *= ((i + 1) as f64).sqrt();
                }
                let clean = &w0 * w0.transpose();
                let noisy = &clean + rng::gaussian_matrix(&mut r, *n, *n, *noise);
                let x = rng::gaussian_matrix(&mut r, *n, *samples, 1.0);
                let y = &noisy * &x;
                let test = if *test_samples > 0 {
                    let xt = rng::gaussian_matrix(&mut r, *n, *test_samples, 1.0);
                    let yt = &clean * &xt;
                    Some(CostSpec::mse(xt, yt)?)
                } else {
                    None
                };
                Ok((CostSpec::mse(x, y)?, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSpec {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_slope_tol")]
    pub slope_tol: f64,
    #[serde(default = "default_sep_tol")]
    pub sep_tol: f64,
}

fn default_window() -> usize {
    20
}
fn default_slope_tol() -> f64 {
    0.05
}
fn default_sep_tol() -> f64 {
    0.1
}

impl Default for PlateauSpec {
    fn default() -> Self {
        PlateauSpec {
            window: default_window(),
            slope_tol: default_slope_tol(),
            sep_tol: default_sep_tol(),
        }
    }
}

/// Single flow run. Expectations become pass/fail checks in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default)]
    pub plateaus: PlateauSpec,
    #[serde(default)]
    pub expect_plateaus: Option<usize>,
    #[serde(default)]
    pub expect_ranks: Option<Vec<usize>>,
    #[serde(default)]
    pub max_train_loss: Option<f64>,
    #[serde(default)]
    pub max_test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyBlock {
    pub cfg_greedy: GreedyConfig,
    /// Also run flow from `N(0, α²)` weights and compare.
    #[serde(default)]
    pub compare_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeSweepBlock {
    pub alphas: Vec<f64>,
    pub r: f64,
    /// Relative tolerance of the fitted escape-time slope.
    #[serde(default = "default_escape_rel")]
    pub slope_rel_tol: f64,
    #[serde(default = "default_r2_min")]
    pub r_squared_min: f64,
}

fn default_escape_rel() -> f64 {
    0.1
}
fn default_r2_min() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSweepBlock {
    pub widths: Vec<usize>,
    pub gammas: Vec<f64>,
    /// Seeds per width.
    pub trials: usize,
    /// Relative slope tolerance for the declared checks.
    #[serde(default = "default_slope_rel")]
    pub slope_rel_tol: f64,
}

fn default_slope_rel() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkCheckBlock {
    pub trials: usize,
    /// Also train with `flow` and report the relative NTK change.
    #[serde(default)]
    pub train: bool,
    /// Relative tolerance of the mean diagonal against its expectation.
    #[serde(default = "default_diag_rel")]
    pub diag_rel_tol: f64,
}

fn default_diag_rel() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineBlock {
    #[serde(default)]
    pub grid_spec: GridSpec,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Figure3Block {
    pub widths: Vec<usize>,
    pub gammas: Vec<f64>,
    pub trials: usize,
    /// Base rate `η₀`; for `γ ≤ 1` the rate is `η₀ w^{(L−1)(γ−1)}`.
    pub eta0: f64,
    /// Apply the `γ ≤ 1` rate rescaling; otherwise every point uses `η₀`.
    #[serde(default = "default_true")]
    pub scale_eta: bool,
    /// Check that at the largest width the largest `γ` reaches a lower
    /// median test loss, and no higher rank, than the smallest `γ`.
    #[serde(default)]
    pub check_trend: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    pub shape: NetShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy: Option<GreedyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_sweep: Option<EscapeSweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime_sweep: Option<RegimeSweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntk_check: Option<NtkCheckBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_path: Option<RefineBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub figure1: Option<RunBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub figure3: Option<Figure3Block>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Parses JSON, reporting the line, column and field path of any error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            CliError::Validation(format!(
                "line {} column {}: field `{}`: {}",
                inner.line(),
                inner.column(),
                e.path(),
                inner
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn blocks(&self) -> Vec<Kind> {
        let mut present = Vec::new();
        let mut add = |on: bool, k: Kind| {
            if on {
                present.push(k)
            }
        };
        add(self.run.is_some(), Kind::Run);
        add(self.greedy.is_some(), Kind::Greedy);
        add(self.escape_sweep.is_some(), Kind::EscapeSweep);
        add(self.regime_sweep.is_some(), Kind::RegimeSweep);
        add(self.ntk_check.is_some(), Kind::NtkCheck);
        add(self.refine_path.is_some(), Kind::RefinePath);
        add(self.figure1.is_some(), Kind::Figure1);
        add(self.figure3.is_some(), Kind::Figure3);
        present
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let blocks = self.blocks();
        if blocks != [self.kind] {
            let names: Vec<&str> = blocks.iter().map(|k| k.name()).collect();
            return Err(invalid(
                "kind",
                format!(
                    "kind `{}` needs exactly one block named `{}`, found {:?}",
                    self.kind.name(),
                    self.kind.name(),
                    names
                ),
            ));
        }
        match (self.gamma, self.sigma) {
            (Some(_), Some(_)) => return Err(invalid("gamma", "gamma and sigma are mutually exclusive")),
            (Some(g), None) if !g.is_finite() => return Err(invalid("gamma", "must be finite")),
            (None, Some(s)) if !(s >= 0.0 && s.is_finite()) => return Err(invalid("sigma", "must be >= 0")),
            (Some(_), None) if self.shape.hidden_width().is_none() => {
                return Err(invalid("gamma", "needs a rectangular shape with at least one hidden layer"))
            }
            _ => {}
        }
        let needs_init = !matches!(self.kind, Kind::RefinePath | Kind::Greedy);
        let sweeps_gamma = matches!(self.kind, Kind::RegimeSweep | Kind::Figure3);
        if needs_init && !sweeps_gamma && self.gamma.is_none() && self.sigma.is_none() {
            return Err(invalid("gamma", "one of gamma or sigma is required"));
        }
        if sweeps_gamma && (self.gamma.is_some() || self.sigma.is_some()) {
            return Err(invalid("gamma", "sweeps take their gammas from the sweep block"));
        }
        if self.kind == Kind::NtkCheck && self.gamma.is_none() {
            return Err(invalid("gamma", "ntk_check needs gamma"));
        }
        let cost = match (&self.cost, &self.task) {
            (Some(_), Some(_)) => return Err(invalid("cost", "cost and task are mutually exclusive")),
            (None, None) => return Err(invalid("cost", "one of cost or task is required")),
            (Some(c), None) => c.clone(),
            (None, Some(t)) => t.build().map_err(|e| invalid("task", e))?.0,
        };
        if cost.dims() != (self.shape.output_dim(), self.shape.input_dim()) {
            return Err(invalid(
                "shape",
                format!(
                    "outer widths ({}, {}) differ from the cost's {:?}",
                    self.shape.input_dim(),
                    self.shape.output_dim(),
                    (cost.dims().1, cost.dims().0)
                ),
            ));
        }
        let needs_flow = matches!(self.kind, Kind::Run | Kind::Figure1 | Kind::EscapeSweep | Kind::Figure3)
            || (self.kind == Kind::Greedy && self.greedy.as_ref().is_some_and(|g| g.compare_alpha.is_some()))
            || (self.kind == Kind::NtkCheck && self.ntk_check.as_ref().is_some_and(|n| n.train));
        match &self.flow {
            Some(f) => f.validate().map_err(|e| invalid("flow", e))?,
            None if needs_flow => return Err(invalid("flow", "this kind needs a flow block")),
            None => {}
        }
        if let Some(g) = &self.greedy {
            g.cfg_greedy.validate().map_err(|e| invalid("greedy.cfg_greedy", e))?;
            if g.compare_alpha.is_some_and(|a| !(a > 0.0)) {
                return Err(invalid("greedy.compare_alpha", "must be > 0"));
            }
        }
        if let Some(e) = &self.escape_sweep {
            if e.alphas.len() < 2 || e.alphas.iter().any(|&a| !(a > 0.0)) {
                return Err(invalid("escape_sweep.alphas", "need at least two positive alphas"));
            }
            if !(e.r > 0.0) {
                return Err(invalid("escape_sweep.r", "must be > 0"));
            }
            if self.shape.depth() < 2 {
                return Err(invalid("shape", "escape sweeps need L >= 2"));
            }
        }
        if let Some(r) = &self.regime_sweep {
            check_sweep("regime_sweep", &r.widths, &r.gammas, r.trials)?;
            if self.shape.depth() < 2 {
                return Err(invalid("shape", "regime sweeps need L >= 2"));
            }
            if matches!(cost, CostSpec::Trace { .. } | CostSpec::Localized { .. }) {
                return Err(invalid("cost", "regime sweeps need an MSE or completion target"));
            }
        }
        if let Some(f) = &self.figure3 {
            check_sweep("figure3", &f.widths, &f.gammas, f.trials)?;
            if !(f.eta0 > 0.0) {
                return Err(invalid("figure3.eta0", "must be > 0"));
            }
        }
        if let Some(n) = &self.ntk_check {
            if n.trials < 2 {
                return Err(invalid("ntk_check.trials", "must be >= 2"));
            }
        }
        if let Some(r) = &self.refine_path {
            if !(r.tol > 0.0) || r.max_iter == 0 {
                return Err(invalid("refine_path", "need tol > 0 and max_iter >= 1"));
            }
        }
        Ok(())
    }

    /// Training cost and optional test cost. Completion costs without an
    /// explicit test cost are tested on their unobserved entries.
    pub fn resolved_costs(&self) -> dln_core::Result<(CostSpec, Option<CostSpec>)> {
        let (cost, test) = match (&self.cost, &self.task) {
            (Some(c), _) => (c.clone(), None),
            (None, Some(t)) => t.build()?,
            (None, None) => return Err(dln_core::DlnError::InvalidArgument("no cost".into())),
        };
        let test = test.or_else(|| cost.mc_complement());
        Ok((cost, test))
    }

    /// Initialization scale: `σ` directly, or `w^{−γ/2}`.
    pub fn init_sigma(&self) -> Option<f64> {
        match (self.sigma, self.gamma) {
            (Some(s), _) => Some(s),
            (None, Some(g)) => self.shape.hidden_width().map(|w| (w as f64).powf(-g / 2.0)),
            _ => None,
        }
    }
}

fn check_sweep(block: &str, widths: &[usize], gammas: &[f64], trials: usize) -> Result<(), CliError> {
    if widths.len() < 2 || widths.windows(2).any(|w| w[1] <= w[0]) || widths[0] == 0 {
        return Err(invalid(&format!("{block}.widths"), "need at least two increasing positive widths"));
    }
    if gammas.is_empty() || gammas.iter().any(|g| !g.is_finite()) {
        return Err(invalid(&format!("{block}.gammas"), "need at least one finite gamma"));
    }
    if trials == 0 {
        return Err(invalid(&format!("{block}.trials"), "must be >= 1"));
    }
    Ok(())
}
