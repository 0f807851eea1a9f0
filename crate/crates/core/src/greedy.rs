//! Greedy low-rank training: alternate full-batch gradient descent with
//! width-one augmentations along the top singular direction of the current
//! cost gradient.

use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::error::{DlnError, Result};
use crate::flow::{integrate_with_test, FlowConfig, Trajectory};
use crate::linalg::{self, Matrix, Triplet};
use crate::network::{init_gaussian, product_map, NetShape, Params};

/// Relative singular gap below which the top triplet is treated as degenerate.
pub const MULTIPLICITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedyConfig {
    pub eps: f64,
    pub inner_steps: usize,
    pub lr: f64,
    /// Target minimum; defaults to the cost's known infimum.
    #[serde(default)]
    pub c_min: Option<f64>,
    pub max_width: usize,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    1e-1
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.inner_steps == 0 || !(self.lr > 0.0) || self.max_width == 0 {
            return Err(DlnError::invalid(
                "greedy needs eps > 0, inner_steps >= 1, lr > 0 and max_width >= 1",
            ));
        }
        if !(self.rank_tol > 0.0) {
            return Err(DlnError::invalid("rank_tol must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyStage {
    pub width: usize,
    pub params: Params,
    pub loss: f64,
    /// Top singular value of `∇C(A_θ)` at the end of the stage.
    pub grad_top_singular: f64,
    /// Rank of `A_θ` at the end of the stage.
    pub rank: usize,
    /// The widening direction chosen after this stage had a near-degenerate
    /// top singular value.
    pub multiplicity_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyReport {
    pub stages: Vec<GreedyStage>,
    pub final_params: Params,
    pub terminated: Termination,
    pub c_min: f64,
}

impl GreedyReport {
    pub fn final_width(&self) -> usize {
        self.stages.last().map(|s| s.width).unwrap_or(0)
    }

    pub fn final_loss(&self) -> f64 {
        self.stages.last().map(|s| s.loss).unwrap_or(f64::NAN)
    }

    /// Stage ranks with consecutive repeats and rank 0 removed.
    pub fn rank_sequence(&self) -> Vec<usize> {
        let mut seq: Vec<usize> = Vec::new();
        for s in &self.stages {
            if s.rank > 0 && seq.last() != Some(&s.rank) {
                seq.push(s.rank);
            }
        }
        seq
    }
}

/// Top triplet of `g` and whether its relative gap is at or below
/// [`MULTIPLICITY_TOL`].
fn top_direction(g: &Matrix) -> Result<(Triplet, bool)> {
    let (t, gap) = linalg::top_triplet(g).ok_or_else(|| DlnError::dims("empty gradient"))?;
    if t.s == 0.0 {
        return Err(DlnError::Domain("cost gradient vanishes; no escape direction".into()));
    }
    Ok((t.clone(), gap <= MULTIPLICITY_TOL * t.s))
}

/// Width-one network `(−ε vᵀ, ε, …, ε, ε u)`.
fn seed_network(t: &Triplet, depth: usize, eps: f64) -> Result<Params> {
    let mut layers = Vec::with_capacity(depth);
    layers.push(linalg::row_of(&t.v) * -eps);
    for _ in 1..depth - 1 {
        layers.push(Matrix::from_element(1, 1, eps));
    }
    layers.push(linalg::col_of(&t.u) * eps);
    Params::new(layers)
}

/// Appends one hidden neuron carrying `−ε vᵀ` in, `ε` through the middle
/// layers and `ε u` out.
pub fn widen(theta: &Params, t: &Triplet, eps: f64) -> Result<Params> {
    let depth = theta.depth();
    if depth < 2 {
        return Err(DlnError::invalid("widening needs L >= 2"));
    }
    let layers = theta
        .layers()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let (r, c) = w.shape();
            if l == 0 {
                let mut m = w.clone().insert_row(r, 0.0);
                m.row_mut(r).copy_from(&(t.v.transpose() * -eps));
                m
            } else if l + 1 == depth {
                let mut m = w.clone().insert_column(c, 0.0);
                m.column_mut(c).copy_from(&(&t.u * eps));
                m
            } else {
                let mut m = w.clone().insert_row(r, 0.0).insert_column(c, 0.0);
                m[(r, c)] = eps;
                m
            }
        })
        .collect();
    Params::new(layers)
}

/// Runs the greedy widening procedure on `cost` for networks of the depth
/// and outer dimensions of `shape_template`.
///
/// Continues while `C(A_θ) ≥ c_min + ε`. Reaching `max_width` without
/// converging returns [`DlnError::MaxWidthExceeded`] with the report.
pub fn greedy_low_rank(cost: &CostSpec, shape_template: &NetShape, cfg: &GreedyConfig) -> Result<GreedyReport> {
    cfg.validate()?;
    let depth = shape_template.depth();
    if depth < 2 {
        return Err(DlnError::invalid("greedy widening needs L >= 2"));
    }
    if cost.dims() != (shape_template.output_dim(), shape_template.input_dim()) {
        return Err(DlnError::dims("cost and network outer dimensions differ"));
    }
    let c_min = match cfg.c_min {
        Some(c) => c,
        None => cost.known_minimum().ok_or(DlnError::NoFiniteMinimum)?,
    };
    let (t0, degenerate) = top_direction(&cost.gradient_at_zero()?)?;
    if degenerate {
        let s = linalg::singular_values(&cost.gradient_at_zero()?);
        return Err(DlnError::MultiplicityNotOne {
            s1: s[0],
            s2: s.get(1).copied().unwrap_or(0.0),
        });
    }
    let mut theta = seed_network(&t0, depth, cfg.eps)?;
    let mut inner = FlowConfig::new(cfg.lr, cfg.inner_steps).every(cfg.inner_steps);
    inner.rank_tol = cfg.rank_tol;
    let mut stages = Vec::new();
    loop {
        let width = theta.widths()[1];
        theta = integrate_with_test(&theta, cost, &inner, None)?.final_params;
        let a = product_map(&theta);
        let loss = cost.value(&a)?;
        let dir = top_direction(&cost.gradient(&a)?).ok();
        stages.push(GreedyStage {
            width,
            params: theta.clone(),
            loss,
            grad_top_singular: dir.as_ref().map(|d| d.0.s).unwrap_or(0.0),
            rank: linalg::rank_of(&a, cfg.rank_tol),
            multiplicity_flag: false,
        });
        let Some((t, flag)) = dir.filter(|_| loss >= c_min + cfg.eps) else {
            return Ok(GreedyReport {
                stages,
                final_params: theta,
                terminated: Termination::Converged,
                c_min,
            });
        };
        if width >= cfg.max_width {
            return Err(DlnError::MaxWidthExceeded(Box::new(GreedyReport {
                stages,
                final_params: theta,
                terminated: Termination::MaxWidth,
                c_min,
            })));
        }
        stages.last_mut().unwrap().multiplicity_flag = flag;
        theta = widen(&theta, &t, cfg.eps)?;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyFlowComparison {
    /// `‖A_flow − A_greedy‖_F / ‖A_greedy‖_F` at the end of both runs.
    pub relative_difference: f64,
    pub flow_ranks: Vec<usize>,
    pub greedy_ranks: Vec<usize>,
    pub ranks_match: bool,
    pub flow_final_loss: f64,
    pub greedy_final_loss: f64,
    pub greedy_width: usize,
}

/// Runs gradient flow from `N(0, α²)` weights and the greedy procedure on
/// the same cost, and compares their end-to-end matrices and rank sequences.
pub fn greedy_vs_flow(
    cost: &CostSpec,
    shape: &NetShape,
    alpha: f64,
    seed: u64,
    cfg_flow: &FlowConfig,
    cfg_greedy: &GreedyConfig,
) -> Result<(GreedyFlowComparison, Trajectory, GreedyReport)> {
    if cost.known_minimum().is_none() && cfg_greedy.c_min.is_none() {
        return Err(DlnError::NoFiniteMinimum);
    }
    let theta0 = init_gaussian(shape, alpha, seed)?;
    let traj = integrate_with_test(&theta0, cost, cfg_flow, None)?;
    let report = greedy_low_rank(cost, shape, cfg_greedy)?;
    let a_flow = product_map(&traj.final_params);
    let a_greedy = product_map(&report.final_params);
    let scale = a_greedy.norm().max(f64::MIN_POSITIVE);
    let flow_ranks = traj.rank_sequence();
    let greedy_ranks = report.rank_sequence();
    let cmp = GreedyFlowComparison {
        relative_difference: (a_flow - a_greedy).norm() / scale,
        ranks_match: flow_ranks == greedy_ranks,
        flow_ranks,
        greedy_ranks,
        flow_final_loss: traj.final_loss(),
        greedy_final_loss: report.final_loss(),
        greedy_width: report.final_width(),
    };
    Ok((cmp, traj, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;

    fn diag_task(d: &[f64]) -> CostSpec {
        let n = d.len();
        CostSpec::mse(Matrix::identity(n, n), Matrix::from_diagonal(&Vector::from_row_slice(d))).unwrap()
    }

    fn cfg() -> GreedyConfig {
        GreedyConfig {
            eps: 1e-3,
            inner_steps: 50_000,
            lr: 1e-2,
            c_min: None,
            max_width: 4,
            rank_tol: 1e-1,
        }
    }

    fn shape() -> NetShape {
        NetShape::rectangular(2, 4, 4, 4).unwrap()
    }

    #[test]
    fn rank_one_target_stops_at_width_one() {
        let cost = diag_task(&[3.0, 0.0, 0.0, 0.0]);
        let rep = greedy_low_rank(&cost, &shape(), &cfg()).unwrap();
        assert_eq!(rep.final_width(), 1);
        assert_eq!(rep.terminated, Termination::Converged);
        let CostSpec::Mse { y, .. } = &cost else { unreachable!() };
        assert!((product_map(&rep.final_params) - y).norm() <= 1e-2);
    }

    #[test]
    fn rank_two_target_passes_through_best_rank_one() {
        let cost = diag_task(&[3.0, 2.0, 0.0, 0.0]);
        let rep = greedy_low_rank(&cost, &shape(), &cfg()).unwrap();
        assert_eq!(rep.final_width(), 2);
        let eckart_young = Matrix::from_diagonal(&Vector::from_row_slice(&[3.0, 0.0, 0.0, 0.0]));
        assert!((product_map(&rep.stages[0].params) - eckart_young).norm() <= 1e-2);
        assert!(rep.stages.windows(2).all(|w| w[1].loss <= w[0].loss));
        assert!(rep.stages.windows(2).all(|w| w[1].width == w[0].width + 1));
        assert_eq!(rep.rank_sequence(), vec![1, 2]);
    }

    #[test]
    fn high_c_min_converges_after_first_stage() {
        let cost = diag_task(&[3.0, 2.0, 0.0, 0.0]);
        let mut c = cfg();
        c.c_min = Some(100.0);
        c.inner_steps = 10;
        let rep = greedy_low_rank(&cost, &shape(), &c).unwrap();
        assert_eq!(rep.stages.len(), 1);
    }

    #[test]
    fn max_width_is_an_error_with_report() {
        let cost = diag_task(&[3.0, 2.0, 1.0, 0.0]);
        let mut c = cfg();
        c.max_width = 1;
        c.inner_steps = 1000;
        match greedy_low_rank(&cost, &shape(), &c) {
            Err(DlnError::MaxWidthExceeded(rep)) => assert_eq!(rep.final_width(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn widening_changes_product_by_eps_power() {
        let cost = diag_task(&[3.0, 2.0, 0.0, 0.0]);
        let mut c = cfg();
        c.inner_steps = 2000;
        c.max_width = 1;
        let Err(DlnError::MaxWidthExceeded(rep)) = greedy_low_rank(&cost, &NetShape::rectangular(3, 4, 1, 4).unwrap(), &c) else {
            panic!()
        };
        let theta = &rep.final_params;
        let a = product_map(theta);
        let (t, _) = top_direction(&cost.gradient(&a).unwrap()).unwrap();
        let wider = widen(theta, &t, c.eps).unwrap();
        let s1 = t.s;
        assert!((product_map(&wider) - a).norm() <= c.eps.powi(3) * (1.0 + s1));
    }

    #[test]
    fn trace_cost_has_no_minimum() {
        let cost = CostSpec::trace(Matrix::identity(4, 4)).unwrap();
        assert!(matches!(greedy_low_rank(&cost, &shape(), &cfg()), Err(DlnError::NoFiniteMinimum)));
        let flow = FlowConfig::new(1e-2, 10);
        assert!(matches!(
            greedy_vs_flow(&cost, &shape(), 1e-3, 0, &flow, &cfg()),
            Err(DlnError::NoFiniteMinimum)
        ));
    }
}
