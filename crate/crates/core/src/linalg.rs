//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// A singular triplet `(u, s, v)` with `A v = s u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub u: Vector,
    pub s: f64,
    pub v: Vector,
}

/// Thin SVD with singular values sorted in descending order.
///
/// Each `(u_i, v_i)` pair is sign-normalized so that the largest-magnitude
/// entry of `u_i` is positive, which makes the output deterministic across
/// LAPACK-free nalgebra versions.
pub fn sorted_svd(a: &Matrix) -> Vec<Triplet> {
    let k = a.nrows().min(a.ncols());
    if k == 0 {
        return Vec::new();
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
        .into_iter()
        .map(|i| {
            let mut uc: Vector = u.column(i).into_owned();
            let mut vc: Vector = vt.row(i).transpose();
            let pivot = uc
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                uc.neg_mut();
                vc.neg_mut();
            }
            Triplet {
                u: uc,
                s: svd.singular_values[i],
                v: vc,
            }
        })
        .collect()
}

pub fn singular_values(a: &Matrix) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Top singular triplet and the gap `s1 - s2` (`s1` when there is only one).
pub fn top_triplet(a: &Matrix) -> Option<(Triplet, f64)> {
    let mut all = sorted_svd(a);
    if all.is_empty() {
        return None;
    }
    let s2 = all.get(1).map(|t| t.s).unwrap_or(0.0);
    let top = all.swap_remove(0);
    let gap = top.s - s2;
    Some((top, gap))
}

pub fn nuclear_norm(a: &Matrix) -> f64 {
    singular_values(a).iter().sum()
}

/// Number of singular values strictly greater than `tol`.
pub fn rank_of(a: &Matrix, tol: f64) -> usize {
    singular_values(a).iter().filter(|&&s| s > tol).count()
}

/// Moore-Penrose pseudoinverse via the SVD, discarding singular values
/// at or below `rel_tol * s_max`.
pub fn pinv(a: &Matrix, rel_tol: f64) -> Matrix {
    let trip = sorted_svd(a);
    let mut out = Matrix::zeros(a.ncols(), a.nrows());
    let cutoff = trip.first().map(|t| t.s * rel_tol).unwrap_or(0.0);
    for t in trip.iter().filter(|t| t.s > cutoff) {
        out += (&t.v * t.u.transpose()) / t.s;
    }
    out
}

/// Rank-one outer product `u vᵀ`.
/// `vᵀ` as a `1 × n` dynamic matrix.
pub fn row_of(v: &Vector) -> Matrix {
    Matrix::from_row_slice(1, v.len(), v.as_slice())
}

/// `u` as an `n × 1` dynamic matrix.
pub fn col_of(u: &Vector) -> Matrix {
    Matrix::from_column_slice(u.len(), 1, u.as_slice())
}

pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    u * v.transpose()
}

/// `‖OᵀO − I‖_F`.
pub fn orthogonality_defect(o: &Matrix) -> f64 {
    let n = o.ncols();
    (o.transpose() * o - Matrix::identity(n, n)).norm()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serde adapter storing a matrix as a row-major array of rows.
pub mod rows_serde {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).ok_or_else(|| D::Error::custom("ragged matrix rows"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 4.0, 1.0]);
        let t = sorted_svd(&a);
        assert_eq!(t.len(), 2);
        assert!(t[0].s >= t[1].s);
        let mut rec = Matrix::zeros(3, 2);
        for tr in &t {
            rec += tr.s * outer(&tr.u, &tr.v);
            assert!((&a * &tr.v - tr.s * &tr.u).norm() < 1e-12);
        }
        assert!((rec - a).norm() < 1e-12);
    }

    #[test]
    fn rank_thresholds() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![5.0, 0.05]));
        assert_eq!(rank_of(&a, 0.1), 1);
        assert_eq!(rank_of(&Matrix::zeros(3, 4), 1e-12), 0);
    }

    #[test]
    fn pinv_left_inverse_of_full_column_rank() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 1.0, 0.0]);
        let p = pinv(&a, 1e-12);
        assert!((p * a - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn top_triplet_gap() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 1.0]));
        let (t, gap) = top_triplet(&a).unwrap();
        assert_eq!(t.s, 2.0);
        assert_eq!(gap, 1.0);
        assert!(t.u[0] > 0.0);
    }
}
