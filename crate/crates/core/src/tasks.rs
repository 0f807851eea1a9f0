//! Small synthetic tasks and structured initializations.

use crate::costs::CostSpec;
use crate::error::{DlnError, Result};
use crate::linalg::{Matrix, Vector};
use crate::network::{NetShape, Params};
use crate::rng::{self, Rng};

/// `n × k` matrix with orthonormal columns drawn from the Haar measure.
pub fn orthonormal_frame(rng: &mut Rng, n: usize, k: usize) -> Matrix {
    let g = rng::gaussian_matrix(rng, n, k, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U diag(s) Vᵀ` with random orthonormal `U`, `V`.
pub fn random_low_rank(n_out: usize, n_in: usize, singular_values: &[f64], seed: u64) -> Result<Matrix> {
    let k = singular_values.len();
    if k == 0 || k > n_out.min(n_in) {
        return Err(DlnError::invalid(format!(
            "rank {k} does not fit a {n_out}x{n_in} matrix"
        )));
    }
    let mut r = rng::stream(seed, 0x11);
    let u = orthonormal_frame(&mut r, n_out, k);
    let v = orthonormal_frame(&mut r, n_in, k);
    Ok(&u * Matrix::from_diagonal(&Vector::from_row_slice(singular_values)) * v.transpose())
}

/// Matrix completion on a random low-rank target with each entry observed
/// independently with probability `fraction`; at least one entry is kept.
pub fn low_rank_completion(
    n_out: usize,
    n_in: usize,
    singular_values: &[f64],
    fraction: f64,
    seed: u64,
) -> Result<CostSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DlnError::invalid("observed fraction must lie in (0, 1]"));
    }
    let a_star = random_low_rank(n_out, n_in, singular_values, seed)?;
    let mut r = rng::stream(seed, 0x12);
    CostSpec::matrix_completion(a_star, observe(&mut r, n_out, n_in, fraction))
}

/// Matrix completion on `A* = U Vᵀ` with `U`, `V` i.i.d. standard Gaussian
/// of `rank` columns, each entry observed with probability `fraction`.
pub fn gaussian_factor_completion(
    n_out: usize,
    n_in: usize,
    rank: usize,
    fraction: f64,
    seed: u64,
) -> Result<CostSpec> {
    if rank == 0 || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DlnError::invalid("need rank >= 1 and an observed fraction in (0, 1]"));
    }
    let mut r = rng::stream(seed, 0x14);
    let u = rng::gaussian_matrix(&mut r, n_out, rank, 1.0);
    let v = rng::gaussian_matrix(&mut r, n_in, rank, 1.0);
    CostSpec::matrix_completion(&u * v.transpose(), observe(&mut r, n_out, n_in, fraction))
}

fn observe(r: &mut Rng, n_out: usize, n_in: usize, fraction: f64) -> Vec<(usize, usize)> {
    let mut observed: Vec<(usize, usize)> = Vec::new();
    for i in 0..n_out {
        for j in 0..n_in {
            if rand::Rng::random::<f64>(r) < fraction {
                observed.push((i, j));
            }
        }
    }
    if observed.is_empty() {
        observed.push((0, 0));
    }
    observed
}

/// MSE regression with `X = I` and `Y = diag(d)`.
pub fn diagonal_regression(d: &[f64]) -> Result<CostSpec> {
    let n = d.len();
    CostSpec::mse(Matrix::identity(n, n), Matrix::from_diagonal(&Vector::from_row_slice(d)))
}

/// Exactly balanced weights `W_ℓ = Q_ℓ diag(d) Q_{ℓ−1}ᵀ` with random
/// orthonormal frames `Q_ℓ` of `k = len(d)` columns, so that
/// `W_ℓ W_ℓᵀ = W_{ℓ+1}ᵀ W_{ℓ+1}` for every `ℓ`.
pub fn balanced_init(shape: &NetShape, d: &[f64], seed: u64) -> Result<Params> {
    let k = d.len();
    let widths = shape.widths();
    if k == 0 || widths.iter().any(|&n| n < k) {
        return Err(DlnError::invalid(format!(
            "balanced init of rank {k} needs every width >= {k}"
        )));
    }
    let mut r = rng::stream(seed, 0x13);
    let frames: Vec<Matrix> = widths.iter().map(|&n| orthonormal_frame(&mut r, n, k)).collect();
    let dm = Matrix::from_diagonal(&Vector::from_row_slice(d));
    let layers = frames
        .windows(2)
        .map(|q| &q[1] * &dm * q[0].transpose())
        .collect();
    Params::new(layers)
}
