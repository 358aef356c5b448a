//! Symmetric-cone primitives: Jordan products, Nesterov-Todd scalings, step lengths.
//!
//! PSD blocks live in scaled half-vectorized form: lower triangle, column-major, off-diagonals
//! multiplied by sqrt(2) so that the Euclidean inner product equals the trace inner product.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    Nonneg(usize),
    /// `(t, z)` with `||z|| <= t`; the size includes `t`.
    Soc(usize),
    /// Order of the symmetric matrix.
    Psd(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Nonneg(d) | Cone::Soc(d) => d,
            Cone::Psd(n) => svec_dim(n),
        }
    }

    pub fn degree(&self) -> usize {
        match *self {
            Cone::Nonneg(d) => d,
            Cone::Soc(_) => 1,
            Cone::Psd(n) => n,
        }
    }

    pub fn identity(&self) -> DVector<f64> {
        match *self {
            Cone::Nonneg(d) => DVector::from_element(d, 1.0),
            Cone::Soc(d) => {
                let mut e = DVector::zeros(d);
                e[0] = 1.0;
                e
            }
            Cone::Psd(n) => svec(&DMatrix::identity(n, n)),
        }
    }

    /// Smallest "eigenvalue" of `v` with respect to the cone; non-negative iff `v` is in the cone.
    pub fn min_eig(&self, v: &[f64]) -> f64 {
        match *self {
            Cone::Nonneg(_) => v.iter().copied().fold(f64::INFINITY, f64::min),
            Cone::Soc(_) => v[0] - norm(&v[1..]),
            Cone::Psd(n) => smat(v, n).symmetric_eigenvalues().min(),
        }
    }
}

pub fn svec_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(svec_dim(n));
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            out[k] = if i == j { m[(i, j)] } else { std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]) };
            k += 1;
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                out[(i, i)] = v[k];
            } else {
                let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                out[(i, j)] = x;
                out[(j, i)] = x;
            }
            k += 1;
        }
    }
    out
}

/// `(i, j)` position of every svec index.
pub fn svec_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(svec_dim(n));
    for j in 0..n {
        for i in j..n {
            out.push((i, j));
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Jordan product `u o v`.
pub fn circ(cone: &Cone, u: &[f64], v: &[f64]) -> DVector<f64> {
    match *cone {
        Cone::Nonneg(d) => DVector::from_fn(d, |i, _| u[i] * v[i]),
        Cone::Soc(d) => {
            let mut out = DVector::zeros(d);
            out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 1..d {
                out[i] = u[0] * v[i] + v[0] * u[i];
            }
            out
        }
        Cone::Psd(n) => {
            let a = smat(u, n);
            let b = smat(v, n);
            svec(&((&a * &b + &b * &a) * 0.5))
        }
    }
}

/// Nesterov-Todd scaling of one block: `W z = W^{-T} s = lambda`.
#[derive(Clone, Debug)]
pub struct BlockScaling {
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub lambda: DVector<f64>,
    /// Eigenvalues of the diagonal PSD scaling point.
    pub psd_eigs: Option<DVector<f64>>,
}

impl BlockScaling {
    /// Solves `lambda o u = r`.
    pub fn lambda_div(&self, cone: &Cone, r: &[f64]) -> DVector<f64> {
        let l = &self.lambda;
        match *cone {
            Cone::Nonneg(d) => DVector::from_fn(d, |i, _| r[i] / l[i]),
            Cone::Soc(d) => {
                let l1r1: f64 = (1..d).map(|i| l[i] * r[i]).sum();
                let det = l[0] * l[0] - (1..d).map(|i| l[i] * l[i]).sum::<f64>();
                let u0 = (l[0] * r[0] - l1r1) / det;
                let mut out = DVector::zeros(d);
                out[0] = u0;
                for i in 1..d {
                    out[i] = (r[i] - u0 * l[i]) / l[0];
                }
                out
            }
            Cone::Psd(n) => {
                let e = self.psd_eigs.as_ref().expect("psd eigenvalues");
                let pairs = svec_pairs(n);
                DVector::from_fn(pairs.len(), |k, _| {
                    let (i, j) = pairs[k];
                    2.0 * r[k] / (e[i] + e[j])
                })
            }
        }
    }

    /// `lambda o lambda`
    pub fn lambda_sq(&self, cone: &Cone) -> DVector<f64> {
        circ(cone, self.lambda.as_slice(), self.lambda.as_slice())
    }

    /// Largest `alpha` with `lambda + alpha * d` in the cone (infinite if unbounded).
    pub fn max_step(&self, cone: &Cone, d: &[f64]) -> f64 {
        let l = &self.lambda;
        match *cone {
            Cone::Nonneg(_) => d
                .iter()
                .zip(l.iter())
                .filter(|(di, _)| **di < 0.0)
                .map(|(di, li)| -li / di)
                .fold(f64::INFINITY, f64::min),
            Cone::Soc(_) => soc_step(l.as_slice(), d),
            Cone::Psd(n) => {
                let e = self.psd_eigs.as_ref().expect("psd eigenvalues");
                let mut m = smat(d, n);
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] /= (e[i] * e[j]).sqrt();
                    }
                }
                let lo = m.symmetric_eigenvalues().min();
                if lo < 0.0 {
                    -1.0 / lo
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

fn soc_step(l: &[f64], d: &[f64]) -> f64 {
    // Largest alpha with (l0 + a d0)^2 - ||l1 + a d1||^2 >= 0 and l0 + a d0 >= 0.
    let a = d[0] * d[0] - d[1..].iter().map(|x| x * x).sum::<f64>();
    let b = 2.0 * (l[0] * d[0] - l[1..].iter().zip(&d[1..]).map(|(x, y)| x * y).sum::<f64>());
    let c = l[0] * l[0] - l[1..].iter().map(|x| x * x).sum::<f64>();
    let mut best = f64::INFINITY;
    if d[0] < 0.0 {
        best = -l[0] / d[0];
    }
    if a.abs() < 1e-300 {
        if b < 0.0 {
            best = best.min(-c / b);
        }
        return best;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return best;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    for root in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
        if root > 0.0 {
            best = best.min(root);
        }
    }
    best
}

/// NT scaling at interior points `s`, `z`; `None` when either left the cone numerically.
pub fn nt_scaling(cone: &Cone, s: &[f64], z: &[f64]) -> Option<BlockScaling> {
    match *cone {
        Cone::Nonneg(d) => {
            if s.iter().chain(z).any(|v| !(*v > 0.0)) {
                return None;
            }
            let w = DVector::from_fn(d, |i, _| (s[i] / z[i]).sqrt());
            Some(BlockScaling {
                w: DMatrix::from_diagonal(&w),
                w_inv: DMatrix::from_diagonal(&w.map(|x| 1.0 / x)),
                lambda: DVector::from_fn(d, |i, _| (s[i] * z[i]).sqrt()),
                psd_eigs: None,
            })
        }
        Cone::Soc(d) => {
            let jn = |v: &[f64]| v[0] * v[0] - v[1..].iter().map(|x| x * x).sum::<f64>();
            let (js, jz) = (jn(s), jn(z));
            if !(js > 0.0 && jz > 0.0 && s[0] > 0.0 && z[0] > 0.0) {
                return None;
            }
            let (aa, bb) = (js.sqrt(), jz.sqrt());
            let beta = (aa / bb).sqrt();
            let sz: f64 = s.iter().zip(z).map(|(a, b)| a * b).sum();
            let gamma = ((sz / (aa * bb) + 1.0) * 0.5).sqrt();
            let mut wbar = DVector::zeros(d);
            wbar[0] = (s[0] / aa + z[0] / bb) / (2.0 * gamma);
            for i in 1..d {
                wbar[i] = (s[i] / aa - z[i] / bb) / (2.0 * gamma);
            }
            let mut v = wbar.clone();
            v[0] += 1.0;
            v /= (2.0 * (wbar[0] + 1.0)).sqrt();
            let mut jmat = DMatrix::identity(d, d);
            for i in 1..d {
                jmat[(i, i)] = -1.0;
            }
            let w = (&v * v.transpose() * 2.0 - &jmat) * beta;
            let jv = &jmat * &v;
            let w_inv = (&jv * jv.transpose() * 2.0 - &jmat) / beta;
            let lambda = &w * DVector::from_column_slice(z);
            Some(BlockScaling { w, w_inv, lambda, psd_eigs: None })
        }
        Cone::Psd(n) => {
            let ls = smat(s, n).cholesky()?.l();
            let lz = smat(z, n).cholesky()?.l();
            let svd = crate::linalg::svd(&(lz.transpose() * &ls))?;
            let (u, vt, eig) = (svd.u, svd.v_t, svd.singular_values);
            if eig.iter().any(|e| !(*e > 0.0)) {
                return None;
            }
            let isq = eig.map(|e| 1.0 / e.sqrt());
            // R = Ls V diag(eig^-1/2), R^-1 = diag(eig^-1/2) U' Lz'
            let r = &ls * vt.transpose() * DMatrix::from_diagonal(&isq);
            let r_inv = DMatrix::from_diagonal(&isq) * u.transpose() * lz.transpose();
            let w = svec_congruence(&r, n);
            let w_inv = svec_congruence(&r_inv, n);
            let lambda = svec(&DMatrix::from_diagonal(&eig));
            Some(BlockScaling { w, w_inv, lambda, psd_eigs: Some(eig) })
        }
    }
}

/// Matrix of `X -> R' X R` in svec coordinates.
pub fn svec_congruence(r: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let pairs = svec_pairs(n);
    let d = pairs.len();
    let sq2 = std::f64::consts::SQRT_2;
    let mut out = DMatrix::zeros(d, d);
    for (col, &(k, l)) in pairs.iter().enumerate() {
        for (row, &(i, j)) in pairs.iter().enumerate() {
            let v = if k == l {
                r[(k, i)] * r[(k, j)]
            } else {
                (r[(k, i)] * r[(l, j)] + r[(l, i)] * r[(k, j)]) / sq2
            };
            out[(row, col)] = if i == j { v } else { v * sq2 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin());
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn svec_round_trip_and_inner_product() {
        let a = spd(4, 0.1);
        let b = spd(4, 0.9);
        assert!((smat(svec(&a).as_slice(), 4) - &a).norm() < 1e-14);
        let tr = (&a * &b).trace();
        assert!((svec(&a).dot(&svec(&b)) - tr).abs() < 1e-12 * tr.abs());
    }

    #[test]
    fn nt_scaling_identities() {
        let cones = [
            (Cone::Nonneg(3), vec![1.0, 2.0, 0.5], vec![0.3, 4.0, 1.0]),
            (Cone::Soc(4), vec![3.0, 1.0, -0.5, 0.2], vec![2.0, -0.3, 0.7, 1.0]),
            (Cone::Psd(3), svec(&spd(3, 0.2)).as_slice().to_vec(), svec(&spd(3, 1.3)).as_slice().to_vec()),
        ];
        for (cone, s, z) in cones {
            let sc = nt_scaling(&cone, &s, &z).unwrap();
            let zv = DVector::from_vec(z.clone());
            let sv = DVector::from_vec(s.clone());
            let wz = &sc.w * &zv;
            let wts = sc.w_inv.transpose() * &sv;
            assert!((&wz - &sc.lambda).norm() < 1e-10, "{cone:?} Wz");
            assert!((&wts - &sc.lambda).norm() < 1e-10, "{cone:?} W^-T s");
            assert!((&sc.w * &sc.w_inv - DMatrix::identity(cone.dim(), cone.dim())).norm() < 1e-10);
            let r = DVector::from_fn(cone.dim(), |i, _| (i as f64 + 1.0).cos());
            let u = sc.lambda_div(&cone, r.as_slice());
            assert!((circ(&cone, sc.lambda.as_slice(), u.as_slice()) - &r).norm() < 1e-10);
        }
    }

    #[test]
    fn congruence_matrix_matches_direct_product() {
        let r = DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.71).cos());
        let x = spd(3, 0.4);
        let direct = svec(&(r.transpose() * &x * &r));
        assert!((svec_congruence(&r, 3) * svec(&x) - direct).norm() < 1e-12);
    }

    #[test]
    fn soc_step_hits_boundary() {
        let cone = Cone::Soc(3);
        let sc = nt_scaling(&cone, &[2.0, 0.5, 0.0], &[2.0, -0.5, 0.0]).unwrap();
        let d = [-1.0, 1.0, 0.3];
        let a = sc.max_step(&cone, &d);
        let p: Vec<f64> = sc.lambda.iter().zip(&d).map(|(l, x)| l + a * x).collect();
        assert!(cone.min_eig(&p).abs() < 1e-10);
    }
}
