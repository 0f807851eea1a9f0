//! Neural tangent kernel, constructive distance bounds to saddles and
//! minima, log-log scaling fits and a Gaussian operator-norm check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DlnError, Result};
use crate::linalg::{self, Matrix};
use crate::network::{init_gaussian, product_map, NetShape, Params};
use crate::rng;

/// `Θ[i,j,k,l] = ∇_θ(A_θ)_{ij} · ∇_θ(A_θ)_{kl}` stored as an
/// `(n_L n_0) × (n_L n_0)` matrix with row index `i·n_0 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkTensor {
    n_out: usize,
    n_in: usize,
    gram: Matrix,
}

impl NtkTensor {
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.gram[(i * self.n_in + j, k * self.n_in + l)]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_out, self.n_in)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.gram
    }

    /// Frobenius norm over all four indices.
    pub fn norm(&self) -> f64 {
        self.gram.norm()
    }

    pub fn diagonal_mean(&self) -> f64 {
        self.gram.diagonal().mean()
    }

    /// Mean of the entries other than `Θ[i,j,i,j]`.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.gram.nrows();
        if n < 2 {
            return 0.0;
        }
        (self.gram.sum() - self.gram.trace()) / (n * n - n) as f64
    }
}

/// `Θ = Σ_ℓ (Suf_ℓ Suf_ℓᵀ) ⊗ (Pre_ℓᵀ Pre_ℓ)` with `Pre_ℓ = W_{ℓ-1}⋯W_1`
/// and `Suf_ℓ = W_L⋯W_{ℓ+1}`.
pub fn ntk_tensor(theta: &Params) -> NtkTensor {
    let layers = theta.layers();
    let depth = layers.len();
    let n_in = layers[0].ncols();
    let n_out = layers[depth - 1].nrows();
    // prefix_gram[ℓ] = Pre_ℓᵀ Pre_ℓ for 1-based ℓ.
    let mut pre = Matrix::identity(n_in, n_in);
    let mut pre_grams = Vec::with_capacity(depth);
    pre_grams.push(Matrix::identity(n_in, n_in));
    for w in &layers[..depth - 1] {
        pre = w * pre;
        pre_grams.push(pre.tr_mul(&pre));
    }
    let mut suf = Matrix::identity(n_out, n_out);
    let mut gram = Matrix::zeros(n_out * n_in, n_out * n_in);
    for l in (0..depth).rev() {
        gram += (&suf * suf.transpose()).kronecker(&pre_grams[l]);
        suf = &suf * &layers[l];
    }
    NtkTensor { n_out, n_in, gram }
}

/// `E[Θ_{ijij}] = L · w^{(1−γ)(L−1)}` for `N(0, w^{−γ})` weights.
pub fn ntk_expectation(depth: usize, width: usize, gamma: f64) -> f64 {
    let l = depth as f64;
    l * (width as f64).powf((1.0 - gamma) * (l - 1.0))
}

/// `(‖Θ(θ_end) − Θ(θ_start)‖_F, ‖Θ(θ_start)‖_F)`.
pub fn ntk_change(theta_start: &Params, theta_end: &Params) -> Result<(f64, f64)> {
    if !theta_start.same_shape(theta_end) {
        return Err(DlnError::dims("NTK change needs equal shapes"));
    }
    let a = ntk_tensor(theta_start);
    let b = ntk_tensor(theta_end);
    Ok(((b.as_matrix() - a.as_matrix()).norm(), a.norm()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkSample {
    pub diagonal_mean: f64,
    pub diagonal_se: f64,
    pub off_diagonal_mean: f64,
    pub off_diagonal_se: f64,
    pub expectation: f64,
}

/// Monte-Carlo estimate of the NTK diagonal and off-diagonal means at
/// `N(0, w^{−γ})` initialization.
pub fn ntk_monte_carlo(shape: &NetShape, gamma: f64, draws: usize, seed: u64) -> Result<NtkSample> {
    let w = shape
        .hidden_width()
        .ok_or_else(|| DlnError::NotRectangular(shape.widths().to_vec()))?;
    if draws < 2 {
        return Err(DlnError::invalid("need at least 2 draws"));
    }
    let sigma = (w as f64).powf(-gamma / 2.0);
    let stats: Vec<(f64, f64)> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let theta = init_gaussian(shape, sigma, rng_seed(seed, k as u64))?;
            let t = ntk_tensor(&theta);
            Ok((t.diagonal_mean(), t.off_diagonal_mean()))
        })
        .collect::<Result<_>>()?;
    let (diag, off): (Vec<f64>, Vec<f64>) = stats.into_iter().unzip();
    let (dm, dse) = mean_se(&diag);
    let (om, ose) = mean_se(&off);
    Ok(NtkSample {
        diagonal_mean: dm,
        diagonal_se: dse,
        off_diagonal_mean: om,
        off_diagonal_se: ose,
        expectation: ntk_expectation(shape.depth(), w, gamma),
    })
}

/// Mixes a base seed with a draw index into an independent seed.
pub fn rng_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `√(‖W_1‖² + ‖W_L‖²)`: distance to the saddle obtained by zeroing the
/// outer layers.
pub fn saddle_distance_upper(theta: &Params) -> Result<f64> {
    if theta.depth() < 2 {
        return Err(DlnError::invalid("saddle distance needs L >= 2"));
    }
    let first = theta.w(1).norm_squared();
    let last = theta.w(theta.depth()).norm_squared();
    Ok((first + last).sqrt())
}

/// The saddle `θ*` with zeroed outer layers.
pub fn saddle_construction(theta: &Params) -> Result<Params> {
    if theta.depth() < 2 {
        return Err(DlnError::invalid("saddle construction needs L >= 2"));
    }
    let mut out = theta.clone();
    let depth = out.depth();
    out.layers_mut()[0].fill(0.0);
    out.layers_mut()[depth - 1].fill(0.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinBranch {
    /// Only the last layer moves: `dW_L = (A* − A_θ)(W_{L−1}⋯W_1)⁺`.
    LastLayer,
    /// Crossing blocks zeroed, then a rank-`k` factorization of `A*` added.
    Factorization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinDistance {
    pub length: f64,
    pub branch: MinBranch,
    /// The last-layer branch was requested but the flank lacked full column rank.
    pub rank_deficient_flank: bool,
    pub target: Params,
}

/// Relative cutoff for the flank's smallest singular value.
const FLANK_RANK_TOL: f64 = 1e-10;

/// Length of a constructed perturbation from `θ` to parameters with
/// `A_θ* = A*`.
///
/// For `γ < 1` only the last layer moves; if `W_{L−1}⋯W_1` is rank
/// deficient this falls back to the factorization branch and flags it.
pub fn min_distance_upper(theta: &Params, a_star: &Matrix, gamma: f64) -> Result<MinDistance> {
    let depth = theta.depth();
    if depth < 2 {
        return Err(DlnError::invalid("min distance needs L >= 2"));
    }
    let a = product_map(theta);
    if a.shape() != a_star.shape() {
        return Err(DlnError::dims("A* shape differs from A_θ"));
    }
    let mut flank_deficient = false;
    if gamma < 1.0 {
        let mut flank = theta.w(1).clone();
        for l in 2..depth {
            flank = theta.w(l) * flank;
        }
        let sv = linalg::singular_values(&flank);
        let full_rank = sv.len() == flank.ncols()
            && sv.last().copied().unwrap_or(0.0) > FLANK_RANK_TOL * sv[0].max(f64::MIN_POSITIVE);
        if full_rank {
            let dw = (a_star - &a) * linalg::pinv(&flank, FLANK_RANK_TOL);
            let mut target = theta.clone();
            target.layers_mut()[depth - 1] += &dw;
            return Ok(MinDistance {
                length: dw.norm(),
                branch: MinBranch::LastLayer,
                rank_deficient_flank: false,
                target,
            });
        }
        flank_deficient = true;
    }
    let target = factorization_target(theta, a_star)?;
    Ok(MinDistance {
        length: target.distance(theta)?,
        branch: MinBranch::Factorization,
        rank_deficient_flank: flank_deficient,
        target,
    })
}

fn factorization_target(theta: &Params, a_star: &Matrix) -> Result<Params> {
    let depth = theta.depth();
    let shape = theta.shape();
    let w = shape
        .hidden_width()
        .ok_or_else(|| DlnError::NotRectangular(shape.widths().to_vec()))?;
    let (n_out, n_in) = a_star.shape();
    let m = n_in.min(n_out);
    let trip: Vec<_> = linalg::sorted_svd(a_star)
        .into_iter()
        .filter(|t| t.s > 1e-12 * a_star.norm())
        .collect();
    let k = trip.len();
    if w < k.max(m) {
        return Err(DlnError::invalid(format!(
            "hidden width {w} is below max(rank(A*), min(n0, nL)) = {}",
            k.max(m)
        )));
    }
    let root = |s: f64| s.powf(1.0 / depth as f64);
    let mut target = theta.clone();
    let layers = target.layers_mut();
    layers[0].fill(0.0);
    layers[depth - 1].fill(0.0);
    for layer in layers[1..depth - 1].iter_mut() {
        for i in 0..w {
            for j in 0..w {
                if i < m || j < m {
                    layer[(i, j)] = 0.0;
                }
            }
        }
    }
    for (c, t) in trip.iter().enumerate() {
        let r = root(t.s);
        layers[0].row_mut(c).copy_from(&(t.v.transpose() * r));
        for layer in layers[1..depth - 1].iter_mut() {
            layer[(c, c)] = r;
        }
        layers[depth - 1].column_mut(c).copy_from(&(&t.u * r));
    }
    Ok(target)
}

/// Ordinary least squares of `ln y` on `ln x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub theory_slope: f64,
}

impl ScalingFit {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, theory_slope: f64) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(DlnError::invalid("a fit needs at least two (x, y) pairs"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DlnError::invalid("fit abscissae must be strictly increasing"));
        }
        if xs.iter().chain(&ys).any(|&v| !(v > 0.0)) {
            return Err(DlnError::invalid("log-log fits need positive data"));
        }
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let (slope, intercept, r_squared) = ols(&lx, &ly);
        Ok(ScalingFit {
            xs,
            ys,
            slope,
            intercept,
            r_squared,
            theory_slope,
        })
    }

    /// `|slope − theory| ≤ rel · |theory|`.
    pub fn within(&self, rel: f64) -> bool {
        (self.slope - self.theory_slope).abs() <= rel * self.theory_slope.abs()
    }
}

/// Slope, intercept and `R²` of the least-squares line through `(x, y)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    (slope, my - slope * mx, r2)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub width: usize,
    pub gamma: f64,
    pub seed: u64,
    pub d_s_upper: f64,
    pub d_m_upper: f64,
    pub min_branch: MinBranch,
    pub rank_deficient_flank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceScaling {
    pub rows: Vec<DistanceRow>,
    pub saddle_fit: ScalingFit,
    pub min_fit: ScalingFit,
}

/// Predicted width exponents `(d_s, d_m)` of the constructive bounds.
pub fn distance_theory_slopes(depth: usize, gamma: f64) -> (f64, f64) {
    let l = depth as f64;
    let ds = (1.0 - gamma) / 2.0;
    let dm = if gamma < 1.0 { -(1.0 - gamma) * (l - 1.0) / 2.0 } else { 0.0 };
    (ds, dm)
}

/// Constructive saddle and minimum distances over a width sweep, fitted
/// on per-width medians across seeds.
pub fn distance_scaling(
    depth: usize,
    widths: &[usize],
    gamma: f64,
    a_star: &Matrix,
    seeds: &[u64],
) -> Result<DistanceScaling> {
    let (n_out, n_in) = a_star.shape();
    let points: Vec<(usize, u64)> = widths
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let rows: Vec<DistanceRow> = points
        .par_iter()
        .map(|&(w, seed)| {
            let shape = NetShape::rectangular(depth, n_in, w, n_out)?;
            let theta = init_gaussian(&shape, (w as f64).powf(-gamma / 2.0), rng_seed(seed, w as u64))?;
            let dm = min_distance_upper(&theta, a_star, gamma)?;
            Ok(DistanceRow {
                width: w,
                gamma,
                seed,
                d_s_upper: saddle_distance_upper(&theta)?,
                d_m_upper: dm.length,
                min_branch: dm.branch,
                rank_deficient_flank: dm.rank_deficient_flank,
            })
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = widths.iter().map(|&w| w as f64).collect();
    let per_width = |f: fn(&DistanceRow) -> f64| -> Vec<f64> {
        widths
            .iter()
            .map(|&w| median(&rows.iter().filter(|r| r.width == w).map(f).collect::<Vec<_>>()))
            .collect()
    };
    let (ts, tm) = distance_theory_slopes(depth, gamma);
    Ok(DistanceScaling {
        saddle_fit: ScalingFit::new(xs.clone(), per_width(|r| r.d_s_upper), ts)?,
        min_fit: ScalingFit::new(xs, per_width(|r| r.d_m_upper), tm)?,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNormCheck {
    pub frequency: f64,
    /// `1 − 2e^{−t²/2}`.
    pub theory: f64,
    /// Binomial standard error of `frequency` under the theory probability.
    pub standard_error: f64,
    pub trials: usize,
}

/// Fraction of `m × n` matrices with i.i.d. `N(0, σ²)` entries satisfying
/// `σ(√max(m,n) − √min(m,n) − t) ≤ s_min` and `s_max ≤ σ(√m + √n + t)`.
pub fn operator_norm_bound_check(m: usize, n: usize, sigma: f64, t: f64, trials: usize, seed: u64) -> Result<OperatorNormCheck> {
    if trials == 0 || m == 0 || n == 0 {
        return Err(DlnError::invalid("need m, n, trials >= 1"));
    }
    let (big, small) = ((m.max(n) as f64).sqrt(), (m.min(n) as f64).sqrt());
    let upper = sigma * (big + small + t);
    let lower = sigma * (big - small - t);
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&k| {
            let mut r = rng::stream(seed, k as u64);
            let a = rng::gaussian_matrix(&mut r, m, n, sigma);
            let sv = linalg::singular_values(&a);
            let (smax, smin) = (sv[0], *sv.last().unwrap());
            smax <= upper && smin >= lower
        })
        .count();
    let theory = 1.0 - 2.0 * (-t * t / 2.0).exp();
    let p = theory.clamp(0.0, 1.0);
    Ok(OperatorNormCheck {
        frequency: hits as f64 / trials as f64,
        theory,
        standard_error: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostSpec;
    use crate::network::loss_gradient;
    use crate::symmetry::{apply_rotation, include, random_rotation};
    use proptest::prelude::*;

    /// Jacobian of `θ ↦ A_θ` by central differences, one row per entry of A.
    fn fd_jacobian(theta: &Params) -> Matrix {
        let shape = theta.shape();
        let flat = theta.flatten();
        let a = product_map(theta);
        let (no, ni) = a.shape();
        let h = 1e-5;
        let mut jac = Matrix::zeros(no * ni, flat.len());
        for p in 0..flat.len() {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[p] += h;
            dn[p] -= h;
            let d = (product_map(&Params::from_flat(&shape, &up).unwrap())
                - product_map(&Params::from_flat(&shape, &dn).unwrap()))
                / (2.0 * h);
            for i in 0..no {
                for j in 0..ni {
                    jac[(i * ni + j, p)] = d[(i, j)];
                }
            }
        }
        jac
    }

    #[test]
    fn single_layer_ntk_is_identity() {
        let theta = init_gaussian(&NetShape::new(vec![3, 2]).unwrap(), 1.0, 1).unwrap();
        let t = ntk_tensor(&theta);
        assert_eq!(t.as_matrix(), &Matrix::identity(6, 6));
    }

    #[test]
    fn ntk_matches_jacobian_oracle() {
        for (widths, seed) in [(vec![2, 3, 2], 1u64), (vec![3, 2, 4, 2], 2), (vec![2, 2, 2, 2, 3], 3)] {
            let theta = init_gaussian(&NetShape::new(widths).unwrap(), 0.8, seed).unwrap();
            let jac = fd_jacobian(&theta);
            let oracle = &jac * jac.transpose();
            assert!((ntk_tensor(&theta).as_matrix() - oracle).amax() <= 1e-8);
        }
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(ntk_expectation(3, 17, 1.0), 3.0);
        assert!((ntk_expectation(2, 100, 0.5) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ntk_change_of_identical_params() {
        let theta = init_gaussian(&NetShape::new(vec![2, 3, 2]).unwrap(), 1.0, 1).unwrap();
        let (d, n) = ntk_change(&theta, &theta).unwrap();
        assert_eq!(d, 0.0);
        assert!(n > 0.0);
    }

    #[test]
    fn saddle_distance_examples() {
        let mut theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 2).unwrap(), 1.0, 1).unwrap();
        assert!(saddle_distance_upper(&theta).unwrap() > 0.0);
        theta = saddle_construction(&theta).unwrap();
        assert_eq!(saddle_distance_upper(&theta).unwrap(), 0.0);
    }

    #[test]
    fn saddle_distance_expectation() {
        // E[d²] = σ²(n0 + nL) w.
        let (n0, nl, w, sigma) = (3usize, 2usize, 20usize, 0.3);
        let shape = NetShape::rectangular(3, n0, w, nl).unwrap();
        let mean: f64 = (0..100)
            .map(|s| saddle_distance_upper(&init_gaussian(&shape, sigma, s).unwrap()).unwrap().powi(2))
            .sum::<f64>()
            / 100.0;
        let expect = sigma * sigma * ((n0 + nl) * w) as f64;
        assert!((mean / expect - 1.0).abs() < 0.1, "{mean} vs {expect}");
    }

    #[test]
    fn saddle_construction_is_critical() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 2).unwrap(), 1.0, 1).unwrap();
        let saddle = saddle_construction(&theta).unwrap();
        let cost = CostSpec::mse(Matrix::identity(2, 2), Matrix::from_element(2, 2, 1.0)).unwrap();
        assert!(loss_gradient(&saddle, &cost).unwrap().norm() <= 1e-8);
    }

    #[test]
    fn min_distance_zero_when_already_optimal() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 6, 2).unwrap(), 0.5, 4).unwrap();
        let a = product_map(&theta);
        let d = min_distance_upper(&theta, &a, 0.5).unwrap();
        assert_eq!(d.branch, MinBranch::LastLayer);
        assert!(d.length < 1e-12);
    }

    #[test]
    fn factorization_branch_rebuilds_target() {
        let theta = init_gaussian(&NetShape::rectangular(3, 3, 8, 3).unwrap(), 0.05, 4).unwrap();
        let u = crate::linalg::Vector::from_row_slice(&[1.0, 2.0, 2.0]) / 3.0;
        let v = crate::linalg::Vector::from_row_slice(&[0.0, 0.6, 0.8]);
        let a_star = linalg::outer(&u, &v) * 4.0;
        let d = min_distance_upper(&theta, &a_star, 1.5).unwrap();
        assert_eq!(d.branch, MinBranch::Factorization);
        assert!((product_map(&d.target) - &a_star).amax() <= 1e-10);
        let zeroed = {
            let mut t = d.target.clone();
            let depth = t.depth();
            let layers = t.layers_mut();
            layers[0].fill(0.0);
            layers[depth - 1].fill(0.0);
            for i in 0..8 {
                for j in 0..8 {
                    if i < 3 || j < 3 {
                        layers[1][(i, j)] = 0.0;
                    }
                }
            }
            t
        };
        // length² = ‖θ − θ̄‖² + ‖added factors‖² up to the cross terms with θ̄.
        let lower = (d.target.distance(&zeroed).unwrap()).powi(2);
        assert!((lower - 3.0 * 4f64.powf(2.0 / 3.0)).abs() < 1e-10);
        let cost = CostSpec::mse(Matrix::identity(3, 3), a_star).unwrap();
        assert!(cost.value(&product_map(&d.target)).unwrap() <= 1e-8);
    }

    #[test]
    fn last_layer_branch_hits_the_minimum() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 10, 2).unwrap(), 0.5, 4).unwrap();
        let a_star = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let d = min_distance_upper(&theta, &a_star, 0.5).unwrap();
        assert_eq!(d.branch, MinBranch::LastLayer);
        assert!((product_map(&d.target) - a_star).amax() <= 1e-10);
    }

    #[test]
    fn rank_deficient_flank_falls_back() {
        let mut theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 2).unwrap(), 0.5, 4).unwrap();
        theta.layers_mut()[0].fill(0.0);
        let a_star = Matrix::identity(2, 2) * 2.0 + Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let d = min_distance_upper(&theta, &a_star, 0.5).unwrap();
        assert!(d.rank_deficient_flank);
        assert_eq!(d.branch, MinBranch::Factorization);
        assert!((product_map(&d.target) - a_star).amax() <= 1e-10);
    }

    #[test]
    fn fit_recovers_power_law() {
        let xs = vec![8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.25)).collect();
        let fit = ScalingFit::new(xs, ys, -0.25).unwrap();
        assert!((fit.slope + 0.25).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.within(1e-9));
    }

    #[test]
    fn operator_norm_scalar_case() {
        // m = n = 1: s = |a|, the two-sided bound is |a| ≤ σ(2 + t); the lower
        // bound σ(1 − 1 − t) ≤ |a| is automatic.
        let t = 1.0;
        let check = operator_norm_bound_check(1, 1, 1.0, t, 4000, 3).unwrap();
        // P(|Z| ≤ 3) ≈ 0.9973 ≥ theory.
        assert!(check.frequency >= check.theory);
        assert!(check.frequency >= 0.99);
        let vacuous = operator_norm_bound_check(5, 5, 1.0, 0.0, 50, 1).unwrap();
        assert!(vacuous.theory < 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn ntk_symmetric_psd(seed in 0u64..10_000, depth in 1usize..4) {
            let theta = init_gaussian(&NetShape::rectangular(depth, 2, 3, 3).unwrap(), 1.0, seed).unwrap();
            let t = ntk_tensor(&theta);
            let m = t.as_matrix();
            prop_assert!((m - m.transpose()).amax() <= 1e-12 * m.amax());
            let eig = m.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            prop_assert!(min >= -1e-9 * m.trace());
            prop_assert_eq!(t.get(0, 1, 2, 0), t.get(2, 0, 0, 1));
        }

        #[test]
        fn ntk_invariant_under_inclusion_and_rotation(seed in 0u64..10_000, depth in 2usize..4) {
            let theta = init_gaussian(&NetShape::rectangular(depth, 2, 3, 2).unwrap(), 1.0, seed).unwrap();
            let base = ntk_tensor(&theta);
            let wide = ntk_tensor(&include(&theta, 5).unwrap());
            prop_assert!((base.as_matrix() - wide.as_matrix()).amax() <= 1e-10);
            let rot = random_rotation(3, depth, seed).unwrap();
            let rotated = ntk_tensor(&apply_rotation(&rot, &theta).unwrap());
            prop_assert!((base.as_matrix() - rotated.as_matrix()).amax() <= 1e-10);
        }
    }
}
