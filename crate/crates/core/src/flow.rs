//! Gradient-flow integration with per-snapshot diagnostics, plateau
//! detection and escape-time measurement.

use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::error::{DlnError, Result};
use crate::linalg;
use crate::network::{loss_value, loss_value_gradient, product_map, GradVec, Params};
use crate::symmetry::balancedness_defect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Plain gradient descent `θ ← θ − η∇ℒ(θ)`.
    #[default]
    Euler,
    /// Classical fourth-order Runge-Kutta on `θ̇ = −∇ℒ(θ)`.
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_steps: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub stop_loss: Option<f64>,
    #[serde(default)]
    pub stop_grad_norm: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    /// Keep a copy of `θ` in every snapshot.
    #[serde(default)]
    pub record_params: bool,
}

fn default_snapshot_every() -> usize {
    100
}

fn default_rank_tol() -> f64 {
    1e-1
}

impl FlowConfig {
    pub fn new(step_size: f64, max_steps: usize) -> Self {
        FlowConfig {
            step_size,
            max_steps,
            snapshot_every: default_snapshot_every(),
            stop_loss: None,
            stop_grad_norm: None,
            integrator: Integrator::Euler,
            rank_tol: default_rank_tol(),
            record_params: false,
        }
    }

    pub fn rk4(mut self) -> Self {
        self.integrator = Integrator::Rk4;
        self
    }

    pub fn every(mut self, k: usize) -> Self {
        self.snapshot_every = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(DlnError::invalid(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.snapshot_every == 0 {
            return Err(DlnError::invalid("snapshot_every must be >= 1"));
        }
        if !(self.rank_tol > 0.0) {
            return Err(DlnError::invalid("rank_tol must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub loss_train: f64,
    pub loss_test: Option<f64>,
    pub grad_norm: f64,
    pub param_norm: f64,
    pub rank: usize,
    pub nuclear_norm: f64,
    pub balance_defect: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<Params>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    StopLoss,
    StopGradNorm,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub final_params: Params,
    pub stop: StopReason,
}

pub const CSV_HEADER: [&str; 9] = [
    "step",
    "time",
    "loss_train",
    "loss_test",
    "grad_norm",
    "param_norm",
    "rank",
    "nuclear_norm",
    "balance_defect",
];

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Snapshot {
    /// CSV fields in [`CSV_HEADER`] order; reals carry 17 significant digits.
    pub fn csv_fields(&self) -> [String; 9] {
        [
            self.step.to_string(),
            fmt_f64(self.time),
            fmt_f64(self.loss_train),
            self.loss_test.map(fmt_f64).unwrap_or_default(),
            fmt_f64(self.grad_norm),
            fmt_f64(self.param_norm),
            self.rank.to_string(),
            fmt_f64(self.nuclear_norm),
            fmt_f64(self.balance_defect),
        ]
    }
}

impl Trajectory {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectories hold at least one snapshot")
    }

    pub fn final_loss(&self) -> f64 {
        self.last().loss_train
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.loss_train).collect()
    }

    /// Ranks visited, with consecutive repeats and rank 0 removed.
    pub fn rank_sequence(&self) -> Vec<usize> {
        let mut seq: Vec<usize> = Vec::new();
        for s in &self.snapshots {
            if s.rank > 0 && seq.last() != Some(&s.rank) {
                seq.push(s.rank);
            }
        }
        seq
    }
}

/// One integrator step from `theta`, given the gradient already evaluated there.
fn advance<F>(field: &F, theta: &Params, g0: &GradVec, eta: f64, integrator: Integrator) -> Result<Params>
where
    F: Fn(&Params) -> Result<(f64, GradVec)>,
{
    match integrator {
        Integrator::Euler => Ok(theta.add_scaled(-eta, g0)),
        Integrator::Rk4 => {
            let k1 = g0;
            let k2 = field(&theta.add_scaled(-0.5 * eta, k1))?.1;
            let k3 = field(&theta.add_scaled(-0.5 * eta, &k2))?.1;
            let k4 = field(&theta.add_scaled(-eta, &k3))?.1;
            let mut next = theta.add_scaled(-eta / 6.0, k1);
            next.axpy(-eta / 3.0, &k2);
            next.axpy(-eta / 3.0, &k3);
            next.axpy(-eta / 6.0, &k4);
            Ok(next)
        }
    }
}

/// Snapshot diagnostics for a classical network under `cost`.
struct Observer<'a> {
    test: Option<&'a CostSpec>,
    rank_tol: f64,
    record: bool,
}

impl Observer<'_> {
    fn snap(&self, step: usize, time: f64, theta: &Params, loss: f64, grad: &GradVec) -> Result<Snapshot> {
        let a = product_map(theta);
        let sv = linalg::singular_values(&a);
        Ok(Snapshot {
            step,
            time,
            loss_train: loss,
            loss_test: self.test.map(|c| loss_value(theta, c)).transpose()?,
            grad_norm: grad.norm(),
            param_norm: theta.norm(),
            rank: sv.iter().filter(|&&s| s > self.rank_tol).count(),
            nuclear_norm: sv.iter().sum(),
            balance_defect: balancedness_defect(theta),
            params: self.record.then(|| theta.clone()),
        })
    }
}

/// Integrates `θ̇ = −field(θ).1` with snapshots, stop criteria and an
/// optional per-step `halt` predicate evaluated on `(θ, t)`.
pub(crate) fn integrate_field<F, H>(
    theta0: &Params,
    cfg: &FlowConfig,
    field: F,
    test: Option<&CostSpec>,
    mut halt: H,
) -> Result<Trajectory>
where
    F: Fn(&Params) -> Result<(f64, GradVec)>,
    H: FnMut(&Params, f64) -> bool,
{
    cfg.validate()?;
    let obs = Observer {
        test,
        rank_tol: cfg.rank_tol,
        record: cfg.record_params,
    };
    let eta = cfg.step_size;
    let mut theta = theta0.clone();
    let mut snapshots = Vec::new();
    let mut step = 0usize;
    loop {
        let time = step as f64 * eta;
        let (loss, grad) = field(&theta)?;
        if !loss.is_finite() || !theta.is_finite() || !grad.is_finite() {
            return Err(DlnError::NonFinite {
                step,
                time,
                partial: Box::new(Trajectory {
                    snapshots,
                    final_params: theta,
                    stop: StopReason::Halted,
                }),
            });
        }
        let grad_norm = grad.norm();
        let stop = if cfg.stop_loss.is_some_and(|s| loss <= s) {
            Some(StopReason::StopLoss)
        } else if cfg.stop_grad_norm.is_some_and(|s| grad_norm <= s) {
            Some(StopReason::StopGradNorm)
        } else if step >= cfg.max_steps {
            Some(StopReason::MaxSteps)
        } else if step > 0 && halt(&theta, time) {
            Some(StopReason::Halted)
        } else {
            None
        };
        if step % cfg.snapshot_every == 0 || stop.is_some() {
            snapshots.push(obs.snap(step, time, &theta, loss, &grad)?);
        }
        if let Some(stop) = stop {
            return Ok(Trajectory {
                snapshots,
                final_params: theta,
                stop,
            });
        }
        theta = advance(&field, &theta, &grad, eta, cfg.integrator)?;
        step += 1;
    }
}

/// Integrates gradient flow of `ℒ(θ) = C(A_θ)` from `θ0`.
///
/// For matrix-completion costs the unobserved entries are reported as the
/// test loss.
pub fn integrate(theta0: &Params, cost: &CostSpec, cfg: &FlowConfig) -> Result<Trajectory> {
    let test = cost.mc_complement();
    integrate_with_test(theta0, cost, cfg, test.as_ref())
}

pub fn integrate_with_test(
    theta0: &Params,
    cost: &CostSpec,
    cfg: &FlowConfig,
    test: Option<&CostSpec>,
) -> Result<Trajectory> {
    loss_value_gradient(theta0, cost)?;
    integrate_field(theta0, cfg, |p| loss_value_gradient(p, cost), test, |_, _| false)
}

/// States of the flow `θ̇ = −field(θ)` at each requested time.
///
/// `times` must be nondecreasing and nonnegative; the last step before each
/// target is shortened so every time is hit exactly.
pub(crate) fn field_at_times<F>(
    theta0: &Params,
    field: F,
    step_size: f64,
    integrator: Integrator,
    times: &[f64],
) -> Result<Vec<Params>>
where
    F: Fn(&Params) -> Result<(f64, GradVec)>,
{
    if !(step_size > 0.0) {
        return Err(DlnError::invalid("step size must be > 0"));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut theta = theta0.clone();
    let mut t = 0.0;
    let mut step = 0usize;
    for &target in times {
        if target < t - 1e-12 * target.abs().max(1.0) {
            return Err(DlnError::invalid("sample times must be nondecreasing and >= 0"));
        }
        // Full steps on the global grid t = kη, then one partial step.
        loop {
            let next = (step + 1) as f64 * step_size;
            let h = if next <= target { next - t } else { target - t };
            if h <= 0.0 {
                break;
            }
            let (_, g) = field(&theta)?;
            theta = advance(&field, &theta, &g, h, integrator)?;
            if !theta.is_finite() {
                return Err(DlnError::NonFinite {
                    step,
                    time: t,
                    partial: Box::new(Trajectory {
                        snapshots: Vec::new(),
                        final_params: theta,
                        stop: StopReason::Halted,
                    }),
                });
            }
            if next <= target {
                step += 1;
                t = next;
            } else {
                // Off-grid: continue from here with a short step to the grid.
                t = target;
                break;
            }
        }
        out.push(theta.clone());
    }
    Ok(out)
}

/// `Γ(t, θ0)` sampled at each of `times`.
pub fn flow_at_times(
    theta0: &Params,
    cost: &CostSpec,
    step_size: f64,
    integrator: Integrator,
    times: &[f64],
) -> Result<Vec<Params>> {
    loss_value_gradient(theta0, cost)?;
    field_at_times(theta0, |p| loss_value_gradient(p, cost), step_size, integrator, times)
}

/// `Γ(t, θ0)` at a single time.
pub fn flow_to_time(
    theta0: &Params,
    cost: &CostSpec,
    step_size: f64,
    integrator: Integrator,
    t: f64,
) -> Result<Params> {
    Ok(flow_at_times(theta0, cost, step_size, integrator, &[t])?.remove(0))
}

/// First time `‖θ(t)‖` reaches `r` starting from `α θ0`, linearly
/// interpolated between the bracketing steps.
///
/// Returns [`DlnError::NeverEscaped`] with the partial trajectory when the
/// radius is not reached within `cfg.max_steps`.
pub fn escape_time(theta0: &Params, cost: &CostSpec, cfg: &FlowConfig, r: f64, alpha: f64) -> Result<f64> {
    if !(r > 0.0) || !(alpha > 0.0) {
        return Err(DlnError::invalid("escape radius and alpha must be > 0"));
    }
    let start = theta0.scaled(alpha);
    let n0 = start.norm();
    if n0 >= r {
        return Ok(0.0);
    }
    let mut prev = (0.0, n0);
    let mut crossing = None;
    let traj = integrate_field(
        &start,
        cfg,
        |p| loss_value_gradient(p, cost),
        None,
        |theta, t| {
            let n = theta.norm();
            if n >= r {
                let (t0, n_prev) = prev;
                crossing = Some(t0 + (t - t0) * (r - n_prev) / (n - n_prev));
                true
            } else {
                prev = (t, n);
                false
            }
        },
    )?;
    crossing.ok_or_else(|| DlnError::NeverEscaped {
        radius: r,
        steps: cfg.max_steps,
        partial: Box::new(traj),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub t_start: f64,
    pub t_end: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub plateaus: Vec<Plateau>,
}

impl PlateauReport {
    pub fn count(&self) -> usize {
        self.plateaus.len()
    }
}

pub const PLATEAU_FLOOR: f64 = 1e-12;

/// Flat stretches of the training loss, excluding the terminal one.
///
/// With `y = ln(max(loss − loss_final, 0) + 1e-12)`, two consecutive
/// snapshots are flat when `|Δy/Δt| ≤ slope_tol`. A plateau is a maximal
/// run of at least `window` snapshots joined by flat pairs. Neighbouring
/// runs whose mean loss drops by less than `sep_tol` (relative) are merged.
/// A plateau must be followed by a drop: a run is kept only if the loss
/// falls by at least `sep_tol` (relative) after it, and by more in log
/// terms than it varies within it. This discards slow terminal convergence.
pub fn detect_plateaus(traj: &Trajectory, window: usize, slope_tol: f64, sep_tol: f64) -> Result<PlateauReport> {
    let times = traj.times();
    let losses = traj.losses();
    detect_plateaus_raw(&times, &losses, window, slope_tol, sep_tol)
}

pub fn detect_plateaus_raw(
    times: &[f64],
    losses: &[f64],
    window: usize,
    slope_tol: f64,
    sep_tol: f64,
) -> Result<PlateauReport> {
    if times.len() != losses.len() {
        return Err(DlnError::dims("times and losses differ in length"));
    }
    if window < 2 {
        return Err(DlnError::invalid("plateau window must be >= 2"));
    }
    if times.len() < window {
        return Err(DlnError::invalid(format!(
            "trajectory has {} snapshots, fewer than the window {window}",
            times.len()
        )));
    }
    let final_loss = *losses.last().unwrap();
    let y: Vec<f64> = losses
        .iter()
        .map(|&l| ((l - final_loss).max(0.0) + PLATEAU_FLOOR).ln())
        .collect();
    let flat: Vec<bool> = (0..times.len() - 1)
        .map(|i| ((y[i + 1] - y[i]) / (times[i + 1] - times[i])).abs() <= slope_tol)
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < flat.len() {
        if flat[i] {
            let start = i;
            while i < flat.len() && flat[i] {
                i += 1;
            }
            // Pairs start..i cover snapshots start..=i.
            if i - start + 1 >= window {
                runs.push((start, i));
            }
        } else {
            i += 1;
        }
    }

    let mean = |(a, b): (usize, usize)| losses[a..=b].iter().sum::<f64>() / (b - a + 1) as f64;
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs {
        if let Some(last) = merged.last_mut() {
            let prev = mean(*last);
            if (prev - mean(run)) < sep_tol * prev.abs() {
                last.1 = run.1;
                continue;
            }
        }
        merged.push(run);
    }
    let floor = final_loss.max(PLATEAU_FLOOR);
    merged.retain(|&(a, b)| {
        let (start, end) = (losses[a], losses[b]);
        let dropped = end - final_loss >= sep_tol * end.abs() && end - final_loss > PLATEAU_FLOOR;
        let inside = (start.max(PLATEAU_FLOOR) / end.max(PLATEAU_FLOOR)).ln().abs();
        dropped && inside < (end.max(PLATEAU_FLOOR) / floor).ln()
    });
    Ok(PlateauReport {
        plateaus: merged
            .into_iter()
            .map(|run| Plateau {
                t_start: times[run.0],
                t_end: times[run.1],
                mean_loss: mean(run),
            })
            .collect(),
    })
}
