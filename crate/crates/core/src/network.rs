//! Network shapes, parameter vectors, the product map `A_θ = W_L ⋯ W_1`
//! and exact loss gradients.
//!
//! Layers are stored ascending: `layers()[0]` is `W_1` (the input layer)
//! and the last entry is `W_L`.

use serde::{Deserialize, Serialize};

use crate::costs::CostSpec;
use crate::error::{DlnError, Result};
use crate::linalg::{self, Matrix};
use crate::rng;

/// Widths `(n_0, …, n_L)` of a deep linear network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetShape {
    widths: Vec<usize>,
}

impl NetShape {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DlnError::invalid(format!(
                "a network needs at least 2 widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(DlnError::invalid(format!("zero width in {widths:?}")));
        }
        Ok(NetShape { widths })
    }

    /// `(n_0, w, …, w, n_L)` with `depth - 1` hidden layers of width `w`.
    pub fn rectangular(depth: usize, n_in: usize, width: usize, n_out: usize) -> Result<Self> {
        if depth == 0 {
            return Err(DlnError::invalid("depth must be at least 1"));
        }
        let mut widths = vec![n_in];
        widths.extend(std::iter::repeat_n(width, depth - 1));
        widths.push(n_out);
        NetShape::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn is_rectangular(&self) -> bool {
        let hidden = &self.widths[1..self.widths.len() - 1];
        hidden.windows(2).all(|w| w[0] == w[1])
    }

    /// Common hidden width of a rectangular network with `L ≥ 2`.
    pub fn hidden_width(&self) -> Option<usize> {
        if self.depth() >= 2 && self.is_rectangular() {
            Some(self.widths[1])
        } else {
            None
        }
    }

    /// `P = Σ n_{ℓ-1} n_ℓ`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Same depth and outer dimensions with every hidden layer set to `width`.
    pub fn with_hidden_width(&self, width: usize) -> Result<Self> {
        NetShape::rectangular(self.depth(), self.input_dim(), width, self.output_dim())
    }
}

impl TryFrom<Vec<usize>> for NetShape {
    type Error = DlnError;
    fn try_from(widths: Vec<usize>) -> Result<Self> {
        NetShape::new(widths)
    }
}

impl From<NetShape> for Vec<usize> {
    fn from(s: NetShape) -> Self {
        s.widths
    }
}

/// Parameters `θ = (W_1, …, W_L)`; layer `ℓ` is `n_ℓ × n_{ℓ-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    layers: Vec<Matrix>,
}

/// Gradient of the loss, laid out exactly like the [`Params`] it came from.
pub type GradVec = Params;

impl Params {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DlnError::MalformedParams("no layers".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(DlnError::MalformedParams(format!(
                    "layer {} is {}x{} but layer {} is {}x{}",
                    l + 1,
                    pair[0].nrows(),
                    pair[0].ncols(),
                    l + 2,
                    pair[1].nrows(),
                    pair[1].ncols()
                )));
            }
        }
        if layers.iter().any(|w| w.nrows() == 0 || w.ncols() == 0) {
            return Err(DlnError::MalformedParams("empty layer".into()));
        }
        Ok(Params { layers })
    }

    pub fn zeros(shape: &NetShape) -> Self {
        let layers = shape
            .widths()
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        Params { layers }
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// Layer `W_ℓ` for 1-based `ℓ`.
    pub fn w(&self, l: usize) -> &Matrix {
        &self.layers[l - 1]
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.layers[0].ncols()];
        widths.extend(self.layers.iter().map(|w| w.nrows()));
        widths
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            widths: self.widths(),
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn check_same_shape(&self, other: &Params) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(DlnError::dims(format!(
                "parameter shapes differ: {:?} vs {:?}",
                self.widths(),
                other.widths()
            )))
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.layers.iter().map(|w| w.norm_squared()).sum()
    }

    /// Euclidean norm of the flattened parameter vector.
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.layers.iter().map(|w| w.amax()).fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Params) -> f64 {
        debug_assert!(self.same_shape(other));
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn scaled(&self, alpha: f64) -> Params {
        Params {
            layers: self.layers.iter().map(|w| w * alpha).collect(),
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Params) -> Params {
        debug_assert!(self.same_shape(other));
        Params {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a + b * alpha)
                .collect(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            *a += b * alpha;
        }
    }

    pub fn sub(&self, other: &Params) -> Result<Params> {
        self.check_same_shape(other)?;
        Ok(self.add_scaled(-1.0, other))
    }

    pub fn distance(&self, other: &Params) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|w| w.iter().all(|x| x.is_finite()))
    }

    /// Flattened entries, ascending layers, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().param_count());
        for w in &self.layers {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
        }
        out
    }

    pub fn from_flat(shape: &NetShape, flat: &[f64]) -> Result<Params> {
        if flat.len() != shape.param_count() {
            return Err(DlnError::dims(format!(
                "expected {} entries, got {}",
                shape.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let layers = shape
            .widths()
            .windows(2)
            .map(|w| {
                let (rows, cols) = (w[1], w[0]);
                let m = Matrix::from_row_slice(rows, cols, &flat[offset..offset + rows * cols]);
                offset += rows * cols;
                m
            })
            .collect();
        Ok(Params { layers })
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    widths: Vec<usize>,
    layers: Vec<Vec<Vec<f64>>>,
}

impl Serialize for Params {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsRepr {
            widths: self.widths(),
            layers: self.layers.iter().map(linalg::to_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let repr = ParamsRepr::deserialize(d)?;
        let layers = repr
            .layers
            .iter()
            .map(|rows| linalg::from_rows(rows).ok_or_else(|| D::Error::custom("ragged layer")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let params = Params::new(layers).map_err(D::Error::custom)?;
        if params.widths() != repr.widths {
            return Err(D::Error::custom(format!(
                "declared widths {:?} do not match layers {:?}",
                repr.widths,
                params.widths()
            )));
        }
        Ok(params)
    }
}

/// `A_θ = W_L ⋯ W_1`, an `n_L × n_0` matrix.
pub fn product_map(theta: &Params) -> Matrix {
    let mut acc = theta.layers[0].clone();
    for w in &theta.layers[1..] {
        acc = w * acc;
    }
    acc
}

/// Per-layer gradients `(W_L⋯W_{ℓ+1})ᵀ G (W_{ℓ-1}⋯W_1)ᵀ` for an arbitrary
/// output-space matrix `G`, i.e. the chain rule through the product map.
///
/// Uses one prefix sweep and one suffix sweep.
pub fn backprop(theta: &Params, g: &Matrix) -> GradVec {
    let layers = &theta.layers;
    let depth = layers.len();
    // prefixes[ℓ] = W_ℓ ⋯ W_1 for ℓ = 1..L-1 (stored at index ℓ-1).
    let mut prefixes: Vec<Matrix> = Vec::with_capacity(depth.saturating_sub(1));
    if depth > 1 {
        prefixes.push(layers[0].clone());
        for w in &layers[1..depth - 1] {
            let next = w * prefixes.last().unwrap();
            prefixes.push(next);
        }
    }
    let mut grads: Vec<Matrix> = vec![Matrix::zeros(0, 0); depth];
    // back = (W_L ⋯ W_{ℓ+1})ᵀ G, an n_ℓ × n_0 matrix.
    let mut back = g.clone();
    for l in (0..depth).rev() {
        grads[l] = if l == 0 {
            back.clone()
        } else {
            &back * prefixes[l - 1].transpose()
        };
        if l > 0 {
            back = layers[l].tr_mul(&back);
        }
    }
    Params { layers: grads }
}

fn check_cost_dims(theta: &Params, cost: &CostSpec) -> Result<()> {
    let (rows, cols) = cost.dims();
    let widths = theta.widths();
    if rows != *widths.last().unwrap() || cols != widths[0] {
        return Err(DlnError::dims(format!(
            "cost expects {rows}x{cols} matrices, network maps {} -> {}",
            widths[0],
            widths.last().unwrap()
        )));
    }
    Ok(())
}

/// `ℒ(θ) = C(A_θ)`.
pub fn loss_value(theta: &Params, cost: &CostSpec) -> Result<f64> {
    Ok(loss_value_gradient(theta, cost)?.0)
}

/// Exact gradient of `ℒ(θ) = C(A_θ)` layer by layer.
pub fn loss_gradient(theta: &Params, cost: &CostSpec) -> Result<GradVec> {
    Ok(loss_value_gradient(theta, cost)?.1)
}

pub fn loss_value_gradient(theta: &Params, cost: &CostSpec) -> Result<(f64, GradVec)> {
    check_cost_dims(theta, cost)?;
    if let CostSpec::Localized { .. } = cost {
        return crate::costs::localized_value_gradient(cost, theta);
    }
    let a = product_map(theta);
    let value = cost.value(&a)?;
    let g = cost.gradient(&a)?;
    Ok((value, backprop(theta, &g)))
}

/// i.i.d. `N(0, σ²)` entries drawn from the stream keyed by `seed`.
pub fn init_gaussian(shape: &NetShape, sigma: f64, seed: u64) -> Result<Params> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DlnError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = rng::stream(seed, 0);
    let layers = shape
        .widths()
        .windows(2)
        .map(|w| rng::gaussian_matrix(&mut rng, w[1], w[0], sigma))
        .collect();
    Ok(Params { layers })
}

/// Number of singular values of `a` strictly above `tol`.
pub fn rank_of(a: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(DlnError::invalid(format!("rank tolerance must be > 0, got {tol}")));
    }
    Ok(linalg::rank_of(a, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_row_slice(v))
    }

    #[test]
    fn shape_basics() {
        let s = NetShape::rectangular(3, 2, 5, 4).unwrap();
        assert_eq!(s.widths(), &[2, 5, 5, 4]);
        assert_eq!(s.param_count(), 10 + 25 + 20);
        assert!(s.is_rectangular());
        assert_eq!(s.hidden_width(), Some(5));
        assert!(!NetShape::new(vec![2, 3, 4, 2]).unwrap().is_rectangular());
        assert!(NetShape::new(vec![3]).is_err());
    }

    #[test]
    fn product_of_diagonals() {
        let theta = Params::new(vec![Matrix::identity(2, 2), diag(&[2.0, 3.0])]).unwrap();
        assert_eq!(product_map(&theta), diag(&[2.0, 3.0]));
    }

    #[test]
    fn zero_layer_annihilates() {
        let theta = Params::new(vec![
            diag(&[1.0, 2.0]),
            Matrix::zeros(3, 2),
            Matrix::from_element(2, 3, 1.5),
        ])
        .unwrap();
        assert_eq!(product_map(&theta), Matrix::zeros(2, 2));
    }

    #[test]
    fn product_matches_opposite_association() {
        let theta = init_gaussian(&NetShape::new(vec![2, 2, 2, 2]).unwrap(), 1.0, 7).unwrap();
        let [w1, w2, w3] = [theta.w(1), theta.w(2), theta.w(3)];
        let left_first = (w3 * w2) * w1;
        assert!((product_map(&theta) - left_first).norm() < 1e-14);
    }

    #[test]
    fn malformed_chain_rejected() {
        let err = Params::new(vec![Matrix::zeros(3, 2), Matrix::zeros(2, 4)]).unwrap_err();
        assert!(matches!(err, DlnError::MalformedParams(_)));
    }

    #[test]
    fn init_is_deterministic_and_zero_sigma_is_origin() {
        let shape = NetShape::rectangular(3, 4, 6, 2).unwrap();
        let a = init_gaussian(&shape, 0.3, 11).unwrap();
        let b = init_gaussian(&shape, 0.3, 11).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_gaussian(&shape, 0.3, 12).unwrap();
        assert_ne!(a.flatten(), c.flatten());
        assert_eq!(init_gaussian(&shape, 0.0, 11).unwrap().norm(), 0.0);
        assert!(init_gaussian(&shape, -1.0, 1).is_err());
    }

    #[test]
    fn init_variance_matches_sigma() {
        let shape = NetShape::new(vec![5, 100, 100, 100, 5]).unwrap();
        let sigma2 = 100f64.powi(-2);
        let theta = init_gaussian(&shape, sigma2.sqrt(), 3).unwrap();
        let flat = theta.flatten();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / sigma2 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn flatten_roundtrip_and_norm() {
        let shape = NetShape::new(vec![3, 2, 4]).unwrap();
        let theta = init_gaussian(&shape, 1.0, 5).unwrap();
        let flat = theta.flatten();
        let norm2: f64 = flat.iter().map(|x| x * x).sum();
        assert!((norm2 - theta.norm_squared()).abs() < 1e-12);
        assert_eq!(Params::from_flat(&shape, &flat).unwrap(), theta);
    }

    #[test]
    fn json_layout() {
        let theta = Params::new(vec![
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::from_row_slice(1, 1, &[2.0]),
        ])
        .unwrap();
        let json = serde_json::to_value(&theta).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"widths": [2, 1, 1], "layers": [[[1.0, 0.0]], [[2.0]]]})
        );
        let back: Params = serde_json::from_value(json).unwrap();
        assert_eq!(back, theta);
        let bad = serde_json::json!({"widths": [2, 2, 1], "layers": [[[1.0, 0.0]], [[2.0]]]});
        assert!(serde_json::from_value::<Params>(bad).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of(&Matrix::zeros(4, 4), 0.5).unwrap(), 0);
        assert_eq!(rank_of(&diag(&[5.0, 0.05]), 0.1).unwrap(), 1);
        let mut r = rng::stream(9, 0);
        let f = rng::gaussian_matrix(&mut r, 10, 3, 1.0);
        let g = rng::gaussian_matrix(&mut r, 3, 10, 1.0);
        assert_eq!(rank_of(&(f * g), 1e-6).unwrap(), 3);
        assert!(rank_of(&Matrix::zeros(1, 1), 0.0).is_err());
    }
}
