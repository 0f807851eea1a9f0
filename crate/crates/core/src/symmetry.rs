//! Hidden-layer rotations, width inclusions, balancedness and the
//! NTK-parametrization equivalence.

use crate::costs::CostSpec;
use crate::error::{DlnError, Result};
use crate::flow::{field_at_times, Integrator};
use crate::linalg::{self, Matrix};
use crate::network::{backprop, product_map, GradVec, Params};
use crate::rng;

/// Orthogonal factors `(O_1, …, O_{L-1})` acting on the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    ops: Vec<Matrix>,
}

pub const ORTHOGONALITY_TOL: f64 = 1e-10;

impl Rotation {
    pub fn new(ops: Vec<Matrix>) -> Result<Self> {
        let w = ops.first().map(|o| o.nrows()).unwrap_or(0);
        for (i, o) in ops.iter().enumerate() {
            if o.nrows() != w || o.ncols() != w {
                return Err(DlnError::dims(format!(
                    "rotation factor {} is {}x{}, expected {w}x{w}",
                    i + 1,
                    o.nrows(),
                    o.ncols()
                )));
            }
            let defect = linalg::orthogonality_defect(o);
            if defect > ORTHOGONALITY_TOL {
                return Err(DlnError::invalid(format!(
                    "rotation factor {} is not orthogonal (defect {defect:e})",
                    i + 1
                )));
            }
        }
        Ok(Rotation { ops })
    }

    pub fn identity(w: usize, depth: usize) -> Self {
        Rotation {
            ops: vec![Matrix::identity(w, w); depth.saturating_sub(1)],
        }
    }

    pub fn ops(&self) -> &[Matrix] {
        &self.ops
    }

    pub fn width(&self) -> usize {
        self.ops.first().map(|o| o.nrows()).unwrap_or(0)
    }
}

/// Haar-distributed orthogonal factors from QR of Gaussian matrices with the
/// sign of `R`'s diagonal moved into `Q`.
pub fn random_rotation(w: usize, depth: usize, seed: u64) -> Result<Rotation> {
    if w == 0 || depth < 2 {
        return Err(DlnError::invalid("random_rotation needs w >= 1 and L >= 2"));
    }
    let mut rng = rng::stream(seed, 0x0707);
    let ops = (0..depth - 1)
        .map(|_| {
            let g = rng::gaussian_matrix(&mut rng, w, w, 1.0);
            let qr = g.qr();
            let mut q = qr.q();
            let r = qr.r();
            for j in 0..w {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            q
        })
        .collect();
    Ok(Rotation { ops })
}

fn hidden_width_of(theta: &Params) -> Result<usize> {
    let shape = theta.shape();
    if !shape.is_rectangular() {
        return Err(DlnError::NotRectangular(shape.widths().to_vec()));
    }
    shape
        .hidden_width()
        .ok_or_else(|| DlnError::invalid("a network with L = 1 has no hidden layers"))
}

/// `Rθ = (O_1 W_1, O_2 W_2 O_1ᵀ, …, W_L O_{L-1}ᵀ)`. Also maps gradients,
/// since `R` acts linearly and orthogonally on parameter space.
pub fn apply_rotation(rot: &Rotation, theta: &Params) -> Result<Params> {
    let w = hidden_width_of(theta)?;
    if rot.width() != w {
        return Err(DlnError::WidthMismatch {
            expected: w,
            got: rot.width(),
        });
    }
    let depth = theta.depth();
    if rot.ops.len() != depth - 1 {
        return Err(DlnError::dims(format!(
            "rotation has {} factors, network needs {}",
            rot.ops.len(),
            depth - 1
        )));
    }
    let layers = theta
        .layers()
        .iter()
        .enumerate()
        .map(|(l, wl)| {
            let left = rot.ops.get(l);
            let right = if l == 0 { None } else { rot.ops.get(l - 1) };
            let mut m = wl.clone();
            if let Some(o) = left {
                m = o * m;
            }
            if let Some(o) = right {
                m = m * o.transpose();
            }
            m
        })
        .collect();
    Params::new(layers)
}

/// Block embedding into hidden width `w_target`: new neurons carry zero
/// weights in and out.
pub fn include(theta: &Params, w_target: usize) -> Result<Params> {
    let w = hidden_width_of(theta)?;
    if w_target < w {
        return Err(DlnError::invalid(format!(
            "cannot include width {w} into smaller width {w_target}"
        )));
    }
    let depth = theta.depth();
    let layers = theta
        .layers()
        .iter()
        .enumerate()
        .map(|(l, wl)| {
            let rows = if l + 1 < depth { w_target } else { wl.nrows() };
            let cols = if l > 0 { w_target } else { wl.ncols() };
            let mut m = Matrix::zeros(rows, cols);
            m.view_mut((0, 0), wl.shape()).copy_from(wl);
            m
        })
        .collect();
    Params::new(layers)
}

/// `max_ℓ ‖W_ℓ W_ℓᵀ − W_{ℓ+1}ᵀ W_{ℓ+1}‖_F`; zero for a single layer.
pub fn balancedness_defect(theta: &Params) -> f64 {
    theta
        .layers()
        .windows(2)
        .map(|pair| (&pair[0] * pair[0].transpose() - pair[1].transpose() * &pair[1]).norm())
        .fold(0.0, f64::max)
}

/// `n_0 ⋯ n_{L-1}`.
fn fan_in_product(theta: &Params) -> f64 {
    let widths = theta.widths();
    widths[..widths.len() - 1].iter().map(|&n| n as f64).product()
}

/// Maps an NTK-parametrized initialization to the classical one.
///
/// Returns `(θ0, c)` with `θ0 = (n_0⋯n_{L-1})^{-1/(2L)} θ0^NTK` and
/// `c = (n_0⋯n_{L-1})^{1/L}`, so that classical flow satisfies
/// `A_{θ(t)} = A^NTK_{θ^NTK(c t)}`.
pub fn ntk_param_map(theta_ntk: &Params) -> (Params, f64) {
    let p = fan_in_product(theta_ntk);
    let depth = theta_ntk.depth() as f64;
    let scale = p.powf(-1.0 / (2.0 * depth));
    (theta_ntk.scaled(scale), p.powf(1.0 / depth))
}

/// `A^NTK_θ = (n_0⋯n_{L-1})^{-1/2} W_L ⋯ W_1`.
pub fn ntk_product_map(theta: &Params) -> Matrix {
    product_map(theta) / fan_in_product(theta).sqrt()
}

/// Value and gradient of `ℒ^NTK(θ) = C(A^NTK_θ)`.
pub fn ntk_loss_value_gradient(theta: &Params, cost: &CostSpec) -> Result<(f64, GradVec)> {
    let c = fan_in_product(theta).sqrt().recip();
    let a = product_map(theta) * c;
    let value = cost.value(&a)?;
    let g = cost.gradient(&a)? * c;
    Ok((value, backprop(theta, &g)))
}

/// NTK-parametrized flow sampled at `times`.
pub fn ntk_flow_at_times(
    theta0: &Params,
    cost: &CostSpec,
    step_size: f64,
    integrator: Integrator,
    times: &[f64],
) -> Result<Vec<Params>> {
    ntk_loss_value_gradient(theta0, cost)?;
    field_at_times(theta0, |p| ntk_loss_value_gradient(p, cost), step_size, integrator, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::flow_at_times;
    use crate::network::{init_gaussian, loss_gradient, NetShape};
    use proptest::prelude::*;

    fn mc_cost(seed: u64) -> CostSpec {
        let mut r = rng::stream(seed, 3);
        let a = rng::gaussian_matrix(&mut r, 3, 2, 1.0);
        CostSpec::matrix_completion(a, vec![(0, 0), (1, 1), (2, 0), (0, 1)]).unwrap()
    }

    #[test]
    fn identity_rotation_is_noop() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 3).unwrap(), 1.0, 1).unwrap();
        assert_eq!(apply_rotation(&Rotation::identity(4, 3), &theta).unwrap(), theta);
    }

    #[test]
    fn width_one_rotations_are_signs() {
        let rot = random_rotation(1, 4, 9).unwrap();
        assert!(rot.ops().iter().all(|o| o[(0, 0)].abs() == 1.0));
    }

    #[test]
    fn wide_rotation_is_orthogonal_and_deterministic() {
        let a = random_rotation(50, 2, 5).unwrap();
        assert!(linalg::orthogonality_defect(&a.ops()[0]) <= 1e-12);
        assert_eq!(a, random_rotation(50, 2, 5).unwrap());
    }

    #[test]
    fn rotation_rejects_bad_shapes() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 3).unwrap(), 1.0, 1).unwrap();
        let rot = random_rotation(5, 3, 1).unwrap();
        assert!(matches!(
            apply_rotation(&rot, &theta),
            Err(DlnError::WidthMismatch { expected: 4, got: 5 })
        ));
        let ragged = init_gaussian(&NetShape::new(vec![2, 3, 4, 2]).unwrap(), 1.0, 1).unwrap();
        assert!(matches!(
            apply_rotation(&rot, &ragged),
            Err(DlnError::NotRectangular(_))
        ));
        assert!(Rotation::new(vec![Matrix::from_element(2, 2, 1.0)]).is_err());
    }

    #[test]
    fn include_same_width_is_noop_and_width_one_preserves_a() {
        let theta = init_gaussian(&NetShape::rectangular(3, 2, 4, 3).unwrap(), 1.0, 1).unwrap();
        assert_eq!(include(&theta, 4).unwrap(), theta);
        assert!(include(&theta, 3).is_err());
        let narrow = init_gaussian(&NetShape::rectangular(4, 3, 1, 2).unwrap(), 1.0, 2).unwrap();
        let wide = include(&narrow, 5).unwrap();
        assert_eq!(wide.widths(), vec![3, 5, 5, 5, 2]);
        assert!((product_map(&wide) - product_map(&narrow)).amax() < 1e-15);
    }

    #[test]
    fn balancedness_examples() {
        let theta = Params::new(vec![
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 1, &[2.0]),
        ])
        .unwrap();
        assert_eq!(balancedness_defect(&theta), 3.0);
        let random = init_gaussian(&NetShape::rectangular(3, 2, 3, 2).unwrap(), 1.0, 1).unwrap();
        assert!(balancedness_defect(&random) > 0.0);
    }

    #[test]
    fn ntk_map_formulas() {
        let ones = init_gaussian(&NetShape::new(vec![1, 1, 1]).unwrap(), 1.0, 3).unwrap();
        let (mapped, c) = ntk_param_map(&ones);
        assert_eq!(mapped, ones);
        assert_eq!(c, 1.0);
        let theta = init_gaussian(&NetShape::new(vec![2, 4, 3]).unwrap(), 1.0, 3).unwrap();
        let (mapped, c) = ntk_param_map(&theta);
        assert!((c - 8f64.sqrt()).abs() < 1e-14);
        let expect = theta.scaled(8f64.powf(-0.25));
        assert!(mapped.distance(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn ntk_trajectories_agree() {
        for (widths, seed) in [(vec![2, 4, 3], 1u64), (vec![2, 3, 3, 2], 2)] {
            let shape = NetShape::new(widths).unwrap();
            let theta_ntk = init_gaussian(&shape, 1.0, seed).unwrap();
            let mut r = rng::stream(seed, 4);
            let x = rng::gaussian_matrix(&mut r, 2, 5, 1.0);
            let y = rng::gaussian_matrix(&mut r, shape.output_dim(), 5, 1.0);
            let cost = CostSpec::mse(x, y).unwrap();
            let (theta0, c) = ntk_param_map(&theta_ntk);
            let times = [0.1, 0.2, 0.3];
            let classical = flow_at_times(&theta0, &cost, 1e-4, Integrator::Rk4, &times).unwrap();
            let scaled: Vec<f64> = times.iter().map(|t| t * c).collect();
            let ntk = ntk_flow_at_times(&theta_ntk, &cost, 1e-4, Integrator::Rk4, &scaled).unwrap();
            for (a, b) in classical.iter().zip(&ntk) {
                assert!((product_map(a) - ntk_product_map(b)).amax() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rotation_preserves_product_and_rotates_gradient(seed in 0u64..10_000, depth in 2usize..5) {
            let theta = init_gaussian(&NetShape::rectangular(depth, 2, 4, 3).unwrap(), 1.0, seed).unwrap();
            let rot = random_rotation(4, depth, seed + 1).unwrap();
            let rotated = apply_rotation(&rot, &theta).unwrap();
            let a = product_map(&theta);
            prop_assert!((product_map(&rotated) - &a).norm() <= 1e-10 * a.norm());
            let cost = mc_cost(seed);
            let lhs = loss_gradient(&rotated, &cost).unwrap();
            let rhs = apply_rotation(&rot, &loss_gradient(&theta, &cost).unwrap()).unwrap();
            prop_assert!(lhs.distance(&rhs).unwrap() <= 1e-9);
        }

        #[test]
        fn inclusion_commutes_with_gradient(seed in 0u64..10_000, depth in 2usize..5, extra in 0usize..4) {
            let theta = init_gaussian(&NetShape::rectangular(depth, 2, 3, 3).unwrap(), 1.0, seed).unwrap();
            let wide = include(&theta, 3 + extra).unwrap();
            let cost = mc_cost(seed);
            let lhs = loss_gradient(&wide, &cost).unwrap();
            let rhs = include(&loss_gradient(&theta, &cost).unwrap(), 3 + extra).unwrap();
            prop_assert!(lhs.distance(&rhs).unwrap() <= 1e-10);
            prop_assert!((balancedness_defect(&wide) - balancedness_defect(&theta)).abs() <= 1e-12 * (1.0 + balancedness_defect(&theta)));
        }
    }
}
