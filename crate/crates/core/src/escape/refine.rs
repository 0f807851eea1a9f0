//! Fixed-point refinement of the optimal escape path of a localized cost.
//!
//! Starting from the homogeneous path `x⁰(t) = d(t) ρ*` (with `T = 0`),
//! iterates
//! `x^{n+1}(t) = x⁰(t) − ∫_{t_min}^t [∇C_r(x^n(u)) − ∇H(x⁰(u))] du`
//! on a grid geometric in `−t`, using trapezoid quadrature.

use serde::{Deserialize, Serialize};

use super::{theoretical_escape_norm, EscapeProfile};
use crate::costs::{homogeneous_gradient, CostSpec};
use crate::error::{DlnError, Result};
use crate::network::{loss_gradient, Params};
use crate::symmetry::include;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_points")]
    pub points: usize,
    /// Last grid time; defaults to where `‖x⁰‖ = r/2`.
    #[serde(default)]
    pub t_max: Option<f64>,
    /// First grid time; chosen by doubling when absent.
    #[serde(default)]
    pub t_min: Option<f64>,
    /// Localization radius; defaults to `0.25 s₁^{1/(L−1)}`.
    #[serde(default)]
    pub r: Option<f64>,
    /// Hidden width of the refined path (the width-one path is included).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Largest acceptable tail `∫_{−∞}^{t_min} ‖∇C_r − ∇H‖`; defaults to `tol/10`.
    #[serde(default)]
    pub tail_bound: Option<f64>,
}

fn default_points() -> usize {
    400
}

fn default_width() -> usize {
    1
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: default_points(),
            t_max: None,
            t_min: None,
            r: None,
            width: default_width(),
            tail_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Homogeneous,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGrid {
    pub times: Vec<f64>,
    pub values: Vec<Params>,
    pub kind: PathKind,
}

impl PathGrid {
    /// CSV header: `t` then `theta_0 … theta_{P-1}`.
    pub fn csv_header(&self) -> Vec<String> {
        let p = self.values.first().map(|v| v.flatten().len()).unwrap_or(0);
        std::iter::once("t".to_string())
            .chain((0..p).map(|i| format!("theta_{i}")))
            .collect()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.times
            .iter()
            .zip(&self.values)
            .map(|(t, v)| {
                std::iter::once(format!("{t:.16e}"))
                    .chain(v.flatten().into_iter().map(|x| format!("{x:.16e}")))
                    .collect()
            })
            .collect()
    }

    /// `sup_t ‖self(t) − other(t)‖` over a shared grid.
    pub fn sup_distance(&self, other: &PathGrid) -> Result<f64> {
        if self.times != other.times {
            return Err(DlnError::dims("paths live on different grids"));
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.distance(b))
            .try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub homogeneous: PathGrid,
    pub refined: PathGrid,
    /// `sup_t ‖x^{n+1} − x^n‖` per iteration.
    pub differences: Vec<f64>,
    /// Ratios of consecutive differences.
    pub contraction_ratios: Vec<f64>,
    pub converged: bool,
    pub r: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub tail_estimate: f64,
    /// The localized cost whose escape path was refined.
    pub cost: CostSpec,
}

/// Geometric grid in `−t` from `t_min` to `t_max` (both negative), ascending.
fn geometric_grid(t_min: f64, t_max: f64, points: usize) -> Vec<f64> {
    let (a, b) = (-t_max, -t_min);
    let mut times: Vec<f64> = (0..points)
        .map(|k| -(b * (a / b).powf(k as f64 / (points - 1) as f64)))
        .collect();
    times[0] = t_min;
    times[points - 1] = t_max;
    times
}

/// Estimate of `∫_{−∞}^{t} ‖∇C_r(x⁰) − ∇H(x⁰)‖ du` from the integrand at `t`,
/// using its exponential (`L = 2`) or power-law (`L > 2`) decay.
fn tail_estimate(integrand: f64, t: f64, depth: usize, s: f64) -> f64 {
    if depth == 2 {
        integrand / (3.0 * s)
    } else {
        let l = depth as f64;
        integrand * (-t) * (l - 2.0) / (l + 1.0)
    }
}

/// Refines the homogeneous optimal escape path into an escape path of the
/// localized cost `C_r`.
///
/// `cost` may be a base cost (it is localized around `G = ∇C(0)` with the
/// grid's radius) or an already localized cost.
pub fn refine_escape_path(
    cost: &CostSpec,
    profile: &EscapeProfile,
    grid: &GridSpec,
    tol: f64,
    max_iter: usize,
) -> Result<Refinement> {
    let depth = profile.depth;
    if depth < 2 {
        return Err(DlnError::invalid("path refinement needs L >= 2"));
    }
    if grid.points < 3 {
        return Err(DlnError::invalid("the grid needs at least 3 points"));
    }
    if !(tol > 0.0) {
        return Err(DlnError::invalid("tol must be > 0"));
    }
    let (localized, r) = match cost {
        CostSpec::Localized { r, .. } => (cost.clone(), *r),
        base => {
            let r = grid
                .r
                .unwrap_or_else(|| 0.25 * profile.s1.powf(1.0 / (depth as f64 - 1.0)));
            (CostSpec::localized(base.clone(), profile.g.clone(), r)?, r)
        }
    };
    let CostSpec::Localized { g, .. } = &localized else { unreachable!() };
    let g = g.clone();
    let s = profile.s_star;
    let rho = include(&profile.rho_star, grid.width.max(1))?;
    let x0_at = |t: f64| -> Result<Params> { Ok(rho.scaled(theoretical_escape_norm(t, depth, s, 0.0)?)) };
    // t with ‖x⁰(t)‖ = target.
    let time_at_norm = |target: f64| {
        if depth == 2 {
            target.ln() / s
        } else {
            let k = depth as f64 - 2.0;
            -target.powf(-k) / (s * k)
        }
    };
    let t_max = grid.t_max.unwrap_or_else(|| time_at_norm(r / 2.0));
    if !(t_max < 0.0) {
        return Err(DlnError::invalid(format!(
            "t_max = {t_max} must be negative; reduce r or set t_max"
        )));
    }
    let correction = |x: &Params, x0: &Params| -> Result<Params> {
        Ok(loss_gradient(x, &localized)?.sub(&homogeneous_gradient(x0, &g))?)
    };
    let tail_at = |t: f64| -> Result<f64> {
        let x0 = x0_at(t)?;
        Ok(tail_estimate(correction(&x0, &x0)?.norm(), t, depth, s))
    };
    let bound = grid.tail_bound.unwrap_or(tol / 10.0);
    let (t_min, tail) = match grid.t_min {
        Some(t_min) => {
            if !(t_min < t_max) {
                return Err(DlnError::invalid("t_min must be below t_max"));
            }
            (t_min, tail_at(t_min)?)
        }
        None => {
            let mut t_min = 2.0 * t_max;
            let mut tail = tail_at(t_min)?;
            for _ in 0..60 {
                if tail < bound {
                    break;
                }
                t_min *= 2.0;
                tail = tail_at(t_min)?;
            }
            (t_min, tail)
        }
    };
    if tail > bound {
        return Err(DlnError::TailNotNegligible { tail, bound, t_min });
    }

    let times = geometric_grid(t_min, t_max, grid.points);
    let x0: Vec<Params> = times.iter().map(|&t| x0_at(t)).collect::<Result<_>>()?;
    let homogeneous = PathGrid {
        times: times.clone(),
        values: x0.clone(),
        kind: PathKind::Homogeneous,
    };

    let mut current = x0.clone();
    let mut differences = Vec::new();
    let mut ratios = Vec::new();
    let mut converged = false;
    let mut above_one = 0;
    for _ in 0..max_iter {
        let integrand: Vec<Params> = current
            .iter()
            .zip(&x0)
            .map(|(x, h)| correction(x, h))
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(times.len());
        let mut acc = Params::zeros(&rho.shape());
        next.push(x0[0].add_scaled(-1.0, &acc));
        for k in 1..times.len() {
            let dt = times[k] - times[k - 1];
            acc.axpy(0.5 * dt, &integrand[k - 1]);
            acc.axpy(0.5 * dt, &integrand[k]);
            next.push(x0[k].add_scaled(-1.0, &acc));
        }
        let diff = next
            .iter()
            .zip(&current)
            .map(|(a, b)| a.distance(b))
            .try_fold(0.0f64, |m, d| d.map(|d| m.max(d)))?;
        if let Some(&prev) = differences.last() {
            let ratio: f64 = if prev > 0.0 { diff / prev } else { 0.0 };
            ratios.push(ratio);
            above_one = if ratio > 1.0 { above_one + 1 } else { 0 };
        }
        differences.push(diff);
        current = next;
        if above_one >= 3 {
            return Err(DlnError::NoContraction(ratios));
        }
        if diff <= tol {
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        homogeneous,
        refined: PathGrid {
            times,
            values: current,
            kind: PathKind::Refined,
        },
        differences,
        contraction_ratios: ratios,
        converged,
        r,
        t_min,
        t_max,
        tail_estimate: tail,
        cost: localized,
    })
}

/// `sup_t ‖ẋ(t) + ∇C(x(t))‖` with `ẋ` from second-order three-point
/// differences on the (nonuniform) grid.
pub fn flow_residual(path: &PathGrid, cost: &CostSpec) -> Result<f64> {
    let t = &path.times;
    let x = &path.values;
    let n = t.len();
    if n < 3 {
        return Err(DlnError::invalid("need at least 3 grid points"));
    }
    let mut worst = 0.0f64;
    for k in 0..n {
        // Stencil (i0, i1, i2) around k.
        let (i0, i1, i2) = if k == 0 {
            (0, 1, 2)
        } else if k == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (k - 1, k, k + 1)
        };
        let (a, b, c) = (t[i0], t[i1], t[i2]);
        let tk = t[k];
        // Derivatives of the Lagrange basis at tk.
        let w0 = ((tk - b) + (tk - c)) / ((a - b) * (a - c));
        let w1 = ((tk - a) + (tk - c)) / ((b - a) * (b - c));
        let w2 = ((tk - a) + (tk - b)) / ((c - a) * (c - b));
        let mut deriv = x[i0].scaled(w0);
        deriv.axpy(w1, &x[i1]);
        deriv.axpy(w2, &x[i2]);
        deriv.axpy(1.0, &loss_gradient(&x[k], cost)?);
        worst = worst.max(deriv.norm());
    }
    Ok(worst)
}
