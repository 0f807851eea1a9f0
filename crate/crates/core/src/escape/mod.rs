//! Saddle escape at the origin: the top singular triplet of `∇C(0)`,
//! escape directions and speeds, escape cones, the homogeneous rescale law,
//! closed-form escape-norm curves and fixed-point refinement of escape paths.

mod refine;

pub use refine::{flow_residual, refine_escape_path, GridSpec, PathGrid, PathKind, Refinement};

use serde::{Deserialize, Serialize};

use crate::costs::{homogeneous_gradient, homogeneous_value, CostSpec};
use crate::error::{DlnError, Result};
use crate::flow::{flow_to_time, FlowConfig, Trajectory};
use crate::linalg::{self, Matrix, Vector};
use crate::network::Params;

/// Relative singular gap at or below which `s_1` is treated as repeated.
pub const MULTIPLICITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeProfile {
    pub depth: usize,
    pub u1: Vector,
    pub v1: Vector,
    pub s1: f64,
    pub gap: f64,
    pub s_star: f64,
    /// Width-one unit direction with `H(ρ*) = −s*/L`.
    pub rho_star: Params,
    /// `G = ∇C(0)`.
    pub g: Matrix,
}

/// `L^{-(L-2)/2} s`.
pub fn optimal_speed(s: f64, depth: usize) -> f64 {
    let l = depth as f64;
    l.powf(-(l - 2.0) / 2.0) * s
}

/// Width-one direction `(1/√L)(sign·vᵀ, 1, …, 1, u)`.
fn width_one_direction(u: &Vector, v: &Vector, depth: usize, sign: f64) -> Result<Params> {
    let k = (depth as f64).sqrt().recip();
    let mut layers = Vec::with_capacity(depth);
    if depth == 1 {
        layers.push(u * v.transpose() * sign);
        return Params::new(layers);
    }
    layers.push(linalg::row_of(v) * (sign * k));
    for _ in 1..depth - 1 {
        layers.push(Matrix::from_element(1, 1, k));
    }
    layers.push(linalg::col_of(u) * k);
    Params::new(layers)
}

/// Escape profile of `H(θ) = Tr[Gᵀ A_θ]` for depth `L ≥ 2`.
pub fn escape_profile_from_g(g: &Matrix, depth: usize) -> Result<EscapeProfile> {
    if depth < 2 {
        return Err(DlnError::invalid("escape analysis needs L >= 2"));
    }
    let (top, gap) = linalg::top_triplet(g).ok_or_else(|| DlnError::dims("empty gradient"))?;
    if top.s == 0.0 {
        return Err(DlnError::Domain("∇C(0) = 0: the origin is not a strict saddle".into()));
    }
    if gap <= MULTIPLICITY_TOL * top.s {
        return Err(DlnError::MultiplicityNotOne {
            s1: top.s,
            s2: top.s - gap,
        });
    }
    let rho_star = width_one_direction(&top.u, &top.v, depth, -1.0)?;
    Ok(EscapeProfile {
        depth,
        s_star: optimal_speed(top.s, depth),
        s1: top.s,
        gap,
        u1: top.u,
        v1: top.v,
        rho_star,
        g: g.clone(),
    })
}

/// Escape profile of `C` at the origin: uses `G = ∇C(0)`.
pub fn escape_profile(cost: &CostSpec, depth: usize) -> Result<EscapeProfile> {
    escape_profile_from_g(&cost.gradient_at_zero()?, depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeDirection {
    pub direction: Params,
    /// Positive exactly when `H < 0` along the direction.
    pub speed: f64,
}

/// Every width-one escape direction `ρ` with `∇H(ρ) = −sρ`, two per
/// nonzero singular value, sorted by speed descending.
pub fn all_escape_directions(g: &Matrix, depth: usize) -> Result<Vec<EscapeDirection>> {
    if depth < 2 {
        return Err(DlnError::invalid("escape analysis needs L >= 2"));
    }
    let triplets = linalg::sorted_svd(g);
    let s_max = triplets.first().map(|t| t.s).unwrap_or(0.0);
    if s_max == 0.0 {
        return Err(DlnError::Domain("G = 0 has no escape directions".into()));
    }
    let mut out = Vec::new();
    for t in triplets.iter().filter(|t| t.s > 1e-12 * s_max) {
        let speed = optimal_speed(t.s, depth);
        out.push(EscapeDirection {
            direction: width_one_direction(&t.u, &t.v, depth, -1.0)?,
            speed,
        });
        out.push(EscapeDirection {
            direction: width_one_direction(&t.u, &t.v, depth, 1.0)?,
            speed: -speed,
        });
    }
    out.sort_by(|a, b| b.speed.partial_cmp(&a.speed).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// `H(θ)/‖θ‖^L < (−s* + ε)/L`.
pub fn escape_cone_member(theta: &Params, g: &Matrix, depth: usize, eps: f64) -> Result<bool> {
    let norm = theta.norm();
    if norm == 0.0 {
        return Err(DlnError::invalid("the escape cone is not defined at θ = 0"));
    }
    if theta.depth() != depth {
        return Err(DlnError::dims("θ depth differs from L"));
    }
    let s_star = optimal_speed(linalg::singular_values(g)[0], depth);
    let l = depth as f64;
    Ok(homogeneous_value(theta, g) / norm.powi(depth as i32) < (-s_star + eps) / l)
}

/// Norm of the homogeneous optimal escape path: `e^{s(t+T)}` for `L = 2`,
/// `(s(L−2)(T−t))^{-1/(L−2)}` for `L > 2`.
pub fn theoretical_escape_norm(t: f64, depth: usize, s: f64, big_t: f64) -> Result<f64> {
    if depth < 2 {
        return Err(DlnError::invalid("escape norms need L >= 2"));
    }
    if !(s > 0.0) {
        return Err(DlnError::invalid("escape speed must be > 0"));
    }
    if depth == 2 {
        return Ok((s * (t + big_t)).exp());
    }
    if t >= big_t {
        return Err(DlnError::Domain(format!(
            "escape norm blows up at T = {big_t}; t = {t} is past it"
        )));
    }
    let k = depth as f64 - 2.0;
    Ok((s * k * (big_t - t)).powf(-1.0 / k))
}

/// Two-sided bound on `‖γ(t, θ0)‖` for a flow started inside the
/// `ε`-escape cone with `‖θ0‖ = norm0`.
pub fn escape_norm_bounds(norm0: f64, t: f64, depth: usize, s_star: f64, eps: f64) -> (f64, f64) {
    let slow = -s_star + 2.0 * eps;
    let fast = -s_star - eps;
    if depth == 2 {
        return (norm0 * (-slow * t).exp(), norm0 * (-fast * t).exp());
    }
    let k = depth as f64 - 2.0;
    let curve = |rate: f64| {
        let base = norm0.powf(-k) + k * rate * t;
        if base <= 0.0 {
            f64::INFINITY
        } else {
            base.powf(-1.0 / k)
        }
    };
    (curve(slow), curve(fast))
}

/// `‖γ_H(t, λθ0) − λ γ_H(λ^{L−2} t, θ0)‖` for the trace cost of `G`.
pub fn homogeneous_rescale_check(theta0: &Params, g: &Matrix, lambda: f64, t: f64, cfg: &FlowConfig) -> Result<f64> {
    if !(lambda > 0.0) || !(t >= 0.0) {
        return Err(DlnError::invalid("need lambda > 0 and t >= 0"));
    }
    let cost = CostSpec::trace(g.clone())?;
    let depth = theta0.depth() as i32;
    let eta = cfg.step_size;
    let lhs = flow_to_time(&theta0.scaled(lambda), &cost, eta, cfg.integrator, t)?;
    if lambda == 1.0 {
        return Ok(0.0);
    }
    let rhs = flow_to_time(theta0, &cost, eta, cfg.integrator, lambda.powi(depth - 2) * t)?.scaled(lambda);
    lhs.distance(&rhs)
}

/// `H(θ(t))/‖θ(t)‖^L + s*/L` at every recorded snapshot.
///
/// Needs a trajectory integrated with `record_params`.
pub fn direction_convergence_stat(traj: &Trajectory, g: &Matrix, depth: usize) -> Result<Vec<f64>> {
    let s_star = optimal_speed(linalg::singular_values(g)[0], depth);
    let l = depth as f64;
    traj.snapshots
        .iter()
        .map(|snap| {
            let theta = snap
                .params
                .as_ref()
                .ok_or_else(|| DlnError::invalid("trajectory was recorded without parameters"))?;
            let n = theta.norm();
            Ok(homogeneous_value(theta, g) / n.powi(depth as i32) + s_star / l)
        })
        .collect()
}

/// `‖∇H(ρ) + sρ‖`.
pub fn escape_equation_residual(rho: &Params, g: &Matrix, speed: f64) -> f64 {
    homogeneous_gradient(rho, g).add_scaled(speed, rho).norm()
}
