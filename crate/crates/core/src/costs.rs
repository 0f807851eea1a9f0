//! Convex matrix costs: mean squared error, matrix completion, the linear
//! trace cost `H(θ) = Tr[Gᵀ A_θ]` and its localized blend with a base cost.

use serde::{Deserialize, Serialize};

use crate::error::{DlnError, Result};
use crate::linalg::Matrix;
use crate::network::{backprop, product_map, GradVec, Params};

/// A convex cost `C` on `n_L × n_0` matrices.
///
/// Construct through the validating constructors or deserialize from JSON:
/// `{"type": "mse", "x": [[..]], "y": [[..]]}`,
/// `{"type": "mc", "a_star": [[..]], "observed": [[i, j], ..]}`,
/// `{"type": "trace", "g": [[..]]}` or
/// `{"type": "localized", "base": {..}, "g": [[..]], "r": 0.1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCost", into = "RawCost")]
pub enum CostSpec {
    Mse {
        x: Matrix,
        y: Matrix,
    },
    MatrixCompletion {
        a_star: Matrix,
        observed: Vec<(usize, usize)>,
    },
    Trace {
        g: Matrix,
    },
    /// `C_r(θ) = H(θ) + e(θ)·h(‖θ‖/r)` with `e(θ) = C(A_θ) − H(θ)`.
    Localized {
        base: Box<CostSpec>,
        g: Matrix,
        r: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawCost {
    Mse {
        #[serde(with = "crate::linalg::rows_serde")]
        x: Matrix,
        #[serde(with = "crate::linalg::rows_serde")]
        y: Matrix,
    },
    Mc {
        #[serde(with = "crate::linalg::rows_serde")]
        a_star: Matrix,
        observed: Vec<(usize, usize)>,
    },
    Trace {
        #[serde(with = "crate::linalg::rows_serde")]
        g: Matrix,
    },
    Localized {
        base: Box<CostSpec>,
        #[serde(with = "crate::linalg::rows_serde")]
        g: Matrix,
        r: f64,
    },
}

impl TryFrom<RawCost> for CostSpec {
    type Error = DlnError;
    fn try_from(raw: RawCost) -> Result<Self> {
        match raw {
            RawCost::Mse { x, y } => CostSpec::mse(x, y),
            RawCost::Mc { a_star, observed } => CostSpec::matrix_completion(a_star, observed),
            RawCost::Trace { g } => CostSpec::trace(g),
            RawCost::Localized { base, g, r } => CostSpec::localized(*base, g, r),
        }
    }
}

impl From<CostSpec> for RawCost {
    fn from(c: CostSpec) -> Self {
        match c {
            CostSpec::Mse { x, y } => RawCost::Mse { x, y },
            CostSpec::MatrixCompletion { a_star, observed } => RawCost::Mc { a_star, observed },
            CostSpec::Trace { g } => RawCost::Trace { g },
            CostSpec::Localized { base, g, r } => RawCost::Localized { base, g, r },
        }
    }
}

impl CostSpec {
    pub fn mse(x: Matrix, y: Matrix) -> Result<Self> {
        if x.ncols() == 0 || x.ncols() != y.ncols() || x.nrows() == 0 || y.nrows() == 0 {
            return Err(DlnError::dims(format!(
                "MSE needs X (n0 x N) and Y (nL x N) with N >= 1; got {}x{} and {}x{}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(CostSpec::Mse { x, y })
    }

    pub fn matrix_completion(a_star: Matrix, observed: Vec<(usize, usize)>) -> Result<Self> {
        if observed.is_empty() {
            return Err(DlnError::invalid("matrix completion needs at least one observed entry"));
        }
        let mut seen = std::collections::HashSet::new();
        for &(i, j) in &observed {
            if i >= a_star.nrows() || j >= a_star.ncols() {
                return Err(DlnError::invalid(format!(
                    "observed index ({i}, {j}) out of range for {}x{} target",
                    a_star.nrows(),
                    a_star.ncols()
                )));
            }
            if !seen.insert((i, j)) {
                return Err(DlnError::invalid(format!("duplicate observed index ({i}, {j})")));
            }
        }
        Ok(CostSpec::MatrixCompletion { a_star, observed })
    }

    pub fn trace(g: Matrix) -> Result<Self> {
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(DlnError::dims("empty trace matrix"));
        }
        Ok(CostSpec::Trace { g })
    }

    pub fn localized(base: CostSpec, g: Matrix, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(DlnError::invalid(format!("localization radius must be > 0, got {r}")));
        }
        if matches!(base, CostSpec::Localized { .. }) {
            return Err(DlnError::invalid("nested localized costs are not supported"));
        }
        if base.dims() != g.shape() {
            return Err(DlnError::dims(format!(
                "homogeneous part is {:?} but base cost acts on {:?}",
                g.shape(),
                base.dims()
            )));
        }
        Ok(CostSpec::Localized {
            base: Box::new(base),
            g,
            r,
        })
    }

    /// Localize `base` around its own linearization at 0: `G = ∇C(0)`.
    pub fn localize_at_origin(base: CostSpec, r: f64) -> Result<Self> {
        let g = base.gradient_at_zero()?;
        CostSpec::localized(base, g, r)
    }

    /// `(n_L, n_0)`, the shape of matrices this cost acts on.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            CostSpec::Mse { x, y } => (y.nrows(), x.nrows()),
            CostSpec::MatrixCompletion { a_star, .. } => a_star.shape(),
            CostSpec::Trace { g } => g.shape(),
            CostSpec::Localized { base, .. } => base.dims(),
        }
    }

    fn check(&self, a: &Matrix) -> Result<()> {
        if a.shape() != self.dims() {
            return Err(DlnError::dims(format!(
                "cost acts on {:?} matrices, got {:?}",
                self.dims(),
                a.shape()
            )));
        }
        Ok(())
    }

    /// `C(A)`. A localized cost has no matrix form and is rejected here;
    /// use [`crate::network::loss_value`].
    pub fn value(&self, a: &Matrix) -> Result<f64> {
        self.check(a)?;
        match self {
            CostSpec::Mse { x, y } => {
                let n = x.ncols() as f64;
                Ok((a * x - y).norm_squared() / n)
            }
            CostSpec::MatrixCompletion { a_star, observed } => {
                let n = observed.len() as f64;
                Ok(observed
                    .iter()
                    .map(|&(i, j)| (a[(i, j)] - a_star[(i, j)]).powi(2))
                    .sum::<f64>()
                    / n)
            }
            CostSpec::Trace { g } => Ok(g.dot(a)),
            CostSpec::Localized { .. } => Err(DlnError::invalid(
                "a localized cost depends on θ, not only on A_θ",
            )),
        }
    }

    /// `∇C(A)`.
    pub fn gradient(&self, a: &Matrix) -> Result<Matrix> {
        self.check(a)?;
        match self {
            CostSpec::Mse { x, y } => {
                let n = x.ncols() as f64;
                Ok((a * x - y) * x.transpose() * (2.0 / n))
            }
            CostSpec::MatrixCompletion { a_star, observed } => {
                let n = observed.len() as f64;
                let mut g = Matrix::zeros(a.nrows(), a.ncols());
                for &(i, j) in observed {
                    g[(i, j)] = 2.0 / n * (a[(i, j)] - a_star[(i, j)]);
                }
                Ok(g)
            }
            CostSpec::Trace { g } => Ok(g.clone()),
            CostSpec::Localized { .. } => Err(DlnError::invalid(
                "a localized cost depends on θ, not only on A_θ",
            )),
        }
    }

    /// `∇C(0)`; for a localized cost this is the gradient of its base.
    pub fn gradient_at_zero(&self) -> Result<Matrix> {
        let (rows, cols) = self.dims();
        match self {
            CostSpec::Localized { base, .. } => base.gradient_at_zero(),
            _ => self.gradient(&Matrix::zeros(rows, cols)),
        }
    }

    /// Test cost on the unobserved entries of a matrix-completion target,
    /// normalized by their own count. `None` for other costs or when every
    /// entry is observed.
    pub fn mc_complement(&self) -> Option<CostSpec> {
        let CostSpec::MatrixCompletion { a_star, observed } = self else {
            return None;
        };
        let seen: std::collections::HashSet<_> = observed.iter().copied().collect();
        let rest: Vec<(usize, usize)> = (0..a_star.nrows())
            .flat_map(|i| (0..a_star.ncols()).map(move |j| (i, j)))
            .filter(|ij| !seen.contains(ij))
            .collect();
        if rest.is_empty() {
            None
        } else {
            Some(CostSpec::MatrixCompletion {
                a_star: a_star.clone(),
                observed: rest,
            })
        }
    }

    /// Infimum of `C` over all matrices when it is known in closed form.
    ///
    /// `Some(0)` for matrix completion, the least-squares residual for MSE,
    /// `None` for the unbounded trace cost.
    pub fn known_minimum(&self) -> Option<f64> {
        match self {
            CostSpec::Mse { x, y } => {
                let a = y * crate::linalg::pinv(x, 1e-12);
                self.value(&a).ok()
            }
            CostSpec::MatrixCompletion { .. } => Some(0.0),
            CostSpec::Trace { g } if g.norm() == 0.0 => Some(0.0),
            CostSpec::Trace { .. } => None,
            CostSpec::Localized { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CostSpec::Mse { .. } => "mse",
            CostSpec::MatrixCompletion { .. } => "mc",
            CostSpec::Trace { .. } => "trace",
            CostSpec::Localized { .. } => "localized",
        }
    }
}

/// Cutoff `h`: 1 on `[0, 1]`, 0 on `[2, ∞)`, quintic smoothstep between.
pub fn cutoff(x: f64) -> f64 {
    if x <= 1.0 {
        1.0
    } else if x >= 2.0 {
        0.0
    } else {
        let u = x - 1.0;
        1.0 - u * u * u * (u * (6.0 * u - 15.0) + 10.0)
    }
}

/// `h'(x)`.
pub fn cutoff_derivative(x: f64) -> f64 {
    if x <= 1.0 || x >= 2.0 {
        0.0
    } else {
        let u = x - 1.0;
        -30.0 * u * u * (1.0 - u) * (1.0 - u)
    }
}

/// `H(θ) = Tr[Gᵀ A_θ]`.
pub fn homogeneous_value(theta: &Params, g: &Matrix) -> f64 {
    g.dot(&product_map(theta))
}

/// `∇H(θ)`.
pub fn homogeneous_gradient(theta: &Params, g: &Matrix) -> GradVec {
    backprop(theta, g)
}

/// Value and gradient of a [`CostSpec::Localized`] cost at `θ`.
pub fn localized_value_gradient(cost: &CostSpec, theta: &Params) -> Result<(f64, GradVec)> {
    let CostSpec::Localized { base, g, r } = cost else {
        return Err(DlnError::invalid("localized_value_gradient needs a localized cost"));
    };
    let a = product_map(theta);
    let c = base.value(&a)?;
    let h_val = g.dot(&a);
    let e = c - h_val;
    let norm = theta.norm();
    let x = norm / r;
    let h = cutoff(x);
    let value = h_val + e * h;
    // ∇C_r = ∇H (1 − h) + ∇C h + e h'(x) θ / (r ‖θ‖), with ∇H and ∇C
    // both pulled back through the same product map.
    let out_grad = g * (1.0 - h) + base.gradient(&a)? * h;
    let mut grad = backprop(theta, &out_grad);
    let dh = cutoff_derivative(x);
    if dh != 0.0 {
        grad.axpy(e * dh / (r * norm), theta);
    }
    Ok((value, grad))
}
