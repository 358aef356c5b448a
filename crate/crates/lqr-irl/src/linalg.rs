//! Dense decompositions not covered well enough by nalgebra.
//!
//! nalgebra 0.35's SVD can return inaccurate singular vectors for matrices with graded rows
//! (reconstruction errors up to 1e-4 relative), so the thin SVD is delegated to faer.

use nalgebra::{DMatrix, DVector};

/// Thin SVD `M = U diag(s) V'` with singular values in nonincreasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * &self.v_t
    }
}

/// `None` if the iteration fails to converge or the input is not finite.
pub fn svd(m: &DMatrix<f64>) -> Option<Svd> {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return Some(Svd { u: DMatrix::zeros(r, 0), singular_values: DVector::zeros(0), v_t: DMatrix::zeros(0, c) });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let f = faer::Mat::<f64>::from_fn(r, c, |i, j| m[(i, j)]);
    let dec = f.thin_svd().ok()?;
    let (u, v, s) = (dec.U(), dec.V(), dec.S());
    Some(Svd {
        u: DMatrix::from_fn(r, k, |i, j| u[(i, j)]),
        singular_values: DVector::from_fn(k, |i, _| s[i]),
        v_t: DMatrix::from_fn(k, c, |i, j| v[(j, i)]),
    })
}

/// Singular values in nonincreasing order; empty if the decomposition fails.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    svd(m).map(|s| s.singular_values).unwrap_or_else(|| DVector::zeros(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_wide_matrix_recomposes() {
        let m = DMatrix::from_fn(5, 30, |i, j| 10f64.powi(3 - i as i32) * ((i * 31 + j * 17) % 13) as f64 - 6.0);
        let s = svd(&m).unwrap();
        assert!((s.recompose() - &m).norm() <= 1e-13 * m.norm());
        assert!(s.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!((&s.u.transpose() * &s.u - DMatrix::identity(5, 5)).norm() < 1e-13);
    }

    #[test]
    fn empty_and_non_finite() {
        assert_eq!(svd(&DMatrix::zeros(0, 3)).unwrap().v_t.shape(), (0, 3));
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(svd(&m).is_none());
    }
}
