//! Canonical conic programs over equality, nonnegative, second-order and PSD cones.
//!
//! Problems are built from [`AffMat`] expressions (matrix-valued affine maps of the flat
//! variable vector) and solved by the homogeneous self-dual interior-point method in [`ipm`].

pub mod cones;
pub mod ipm;

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use cones::{smat, svec, Cone};
pub use ipm::{SolverSettings, Status};

use crate::error::{Error, Result};

/// Tolerance on the asymmetry of an affine map passed to a PSD constraint.
const SYM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarShape {
    Scalar,
    Matrix(usize, usize),
    /// Symmetric `n x n`, stored as its lower triangle.
    Symmetric(usize),
}

impl VarShape {
    pub fn len(&self) -> usize {
        match *self {
            VarShape::Scalar => 1,
            VarShape::Matrix(r, c) => r * c,
            VarShape::Symmetric(n) => n * (n + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        match *self {
            VarShape::Scalar => (1, 1),
            VarShape::Matrix(r, c) => (r, c),
            VarShape::Symmetric(n) => (n, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarSlice {
    pub name: String,
    pub shape: VarShape,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Affine matrix-valued map `M(x) = M0 + sum_i x_i M_i`.
///
/// Stored as a `(rows*cols) x (1 + nvar)` coefficient matrix over the column-major
/// vectorization; column 0 holds the constant.
#[derive(Clone, Debug, PartialEq)]
pub struct AffMat {
    rows: usize,
    cols: usize,
    coef: DMatrix<f64>,
}

impl AffMat {
    pub fn constant(m: &DMatrix<f64>) -> Self {
        let mut coef = DMatrix::zeros(m.len(), 1);
        coef.column_mut(0).copy_from_slice(m.as_slice());
        Self { rows: m.nrows(), cols: m.ncols(), coef }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, coef: DMatrix::zeros(rows * cols, 1) }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(&DMatrix::from_element(1, 1, v))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nvar(&self) -> usize {
        self.coef.ncols() - 1
    }

    fn widened(&self, nvar: usize) -> DMatrix<f64> {
        if self.nvar() >= nvar {
            return self.coef.clone();
        }
        let mut c = DMatrix::zeros(self.coef.nrows(), nvar + 1);
        c.columns_mut(0, self.coef.ncols()).copy_from(&self.coef);
        c
    }

    fn zip(&self, other: &AffMat, f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>) -> AffMat {
        assert_eq!(self.shape(), other.shape(), "affine shape mismatch");
        let nv = self.nvar().max(other.nvar());
        AffMat { rows: self.rows, cols: self.cols, coef: f(&self.widened(nv), &other.widened(nv)) }
    }

    /// `C * M`
    pub fn lmul(&self, c: &DMatrix<f64>) -> AffMat {
        assert_eq!(c.ncols(), self.rows, "left factor has wrong width");
        let p = c.nrows();
        let mut coef = DMatrix::zeros(p * self.cols, self.coef.ncols());
        for j in 0..self.cols {
            let blk = self.coef.rows(j * self.rows, self.rows);
            coef.rows_mut(j * p, p).copy_from(&(c * blk));
        }
        AffMat { rows: p, cols: self.cols, coef }
    }

    /// `M * D`
    pub fn rmul(&self, d: &DMatrix<f64>) -> AffMat {
        assert_eq!(d.nrows(), self.cols, "right factor has wrong height");
        let q = d.ncols();
        let mut coef = DMatrix::zeros(self.rows * q, self.coef.ncols());
        for jj in 0..q {
            let mut acc = coef.rows_mut(jj * self.rows, self.rows);
            for j in 0..self.cols {
                let w = d[(j, jj)];
                if w != 0.0 {
                    acc += self.coef.rows(j * self.rows, self.rows) * w;
                }
            }
        }
        AffMat { rows: self.rows, cols: q, coef }
    }

    /// `C * M * D`
    pub fn sandwich(&self, c: &DMatrix<f64>, d: &DMatrix<f64>) -> AffMat {
        self.lmul(c).rmul(d)
    }

    pub fn t(&self) -> AffMat {
        let mut coef = DMatrix::zeros(self.coef.nrows(), self.coef.ncols());
        for i in 0..self.rows {
            for j in 0..self.cols {
                coef.row_mut(i * self.cols + j).copy_from(&self.coef.row(j * self.rows + i));
            }
        }
        AffMat { rows: self.cols, cols: self.rows, coef }
    }

    pub fn entry(&self, i: usize, j: usize) -> AffMat {
        AffMat { rows: 1, cols: 1, coef: self.coef.rows(j * self.rows + i, 1).into_owned() }
    }

    pub fn sub_block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> AffMat {
        let mut coef = DMatrix::zeros(nr * nc, self.coef.ncols());
        for j in 0..nc {
            for i in 0..nr {
                coef.row_mut(j * nr + i).copy_from(&self.coef.row((c0 + j) * self.rows + r0 + i));
            }
        }
        AffMat { rows: nr, cols: nc, coef }
    }

    pub fn trace(&self) -> AffMat {
        assert_eq!(self.rows, self.cols, "trace of a non-square map");
        let mut coef = DMatrix::zeros(1, self.coef.ncols());
        for i in 0..self.rows {
            coef += self.coef.row(i * self.rows + i);
        }
        AffMat { rows: 1, cols: 1, coef }
    }

    /// Block matrix from a grid of pieces; `None` entries are zero blocks.
    pub fn block(grid: &[Vec<Option<AffMat>>]) -> AffMat {
        let nbr = grid.len();
        let nbc = grid[0].len();
        let heights: Vec<usize> = (0..nbr)
            .map(|bi| grid[bi].iter().flatten().next().expect("block row with no pieces").rows)
            .collect();
        let widths: Vec<usize> = (0..nbc)
            .map(|bj| grid.iter().filter_map(|r| r[bj].as_ref()).next().expect("block column with no pieces").cols)
            .collect();
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let nv = grid.iter().flatten().flatten().map(|a| a.nvar()).max().unwrap_or(0);
        let mut coef = DMatrix::zeros(rows * cols, nv + 1);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, piece) in row.iter().enumerate() {
                if let Some(p) = piece {
                    assert_eq!(p.shape(), (heights[bi], widths[bj]), "block piece has wrong shape");
                    let pc = p.widened(nv);
                    for j in 0..p.cols {
                        for i in 0..p.rows {
                            coef.row_mut((c0 + j) * rows + r0 + i).copy_from(&pc.row(j * p.rows + i));
                        }
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        AffMat { rows, cols, coef }
    }

    /// Value at a flat variable vector.
    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let nv = self.nvar();
        let mut v = self.coef.column(0).into_owned();
        if nv > 0 {
            v += self.coef.columns(1, nv) * x.rows(0, nv);
        }
        DMatrix::from_column_slice(self.rows, self.cols, v.as_slice())
    }

    /// Coefficient rows of the vectorization, padded to `nvar` variables.
    fn rows_for(&self, nvar: usize) -> DMatrix<f64> {
        self.widened(nvar)
    }

    /// Scaled half-vectorization of the symmetric part; errors when the map is not symmetric.
    fn svec_rows(&self, nvar: usize) -> Result<DMatrix<f64>> {
        if self.rows != self.cols {
            return Err(Error::shape(format!("PSD constraint on a {}x{} map", self.rows, self.cols)));
        }
        let n = self.rows;
        let c = self.widened(nvar);
        let scale = 1.0 + c.amax();
        let pairs = cones::svec_pairs(n);
        let mut out = DMatrix::zeros(pairs.len(), c.ncols());
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let a = c.row(j * n + i);
            let b = c.row(i * n + j);
            if (a - b).amax() > SYM_TOL * scale {
                return Err(Error::invalid(format!("PSD constraint on a non-symmetric map at ({i},{j})")));
            }
            if i == j {
                out.row_mut(k).copy_from(&a);
            } else {
                out.row_mut(k).copy_from(&((a + b) * (std::f64::consts::SQRT_2 * 0.5)));
            }
        }
        Ok(out)
    }
}

impl Add for &AffMat {
    type Output = AffMat;
    fn add(self, o: &AffMat) -> AffMat {
        self.zip(o, |a, b| a + b)
    }
}

impl Sub for &AffMat {
    type Output = AffMat;
    fn sub(self, o: &AffMat) -> AffMat {
        self.zip(o, |a, b| a - b)
    }
}

impl Add for AffMat {
    type Output = AffMat;
    fn add(self, o: AffMat) -> AffMat {
        &self + &o
    }
}

impl Sub for AffMat {
    type Output = AffMat;
    fn sub(self, o: AffMat) -> AffMat {
        &self - &o
    }
}

impl Add<&AffMat> for AffMat {
    type Output = AffMat;
    fn add(self, o: &AffMat) -> AffMat {
        &self + o
    }
}

impl Sub<&AffMat> for AffMat {
    type Output = AffMat;
    fn sub(self, o: &AffMat) -> AffMat {
        &self - o
    }
}

impl Add<AffMat> for &AffMat {
    type Output = AffMat;
    fn add(self, o: AffMat) -> AffMat {
        self + &o
    }
}

impl Sub<AffMat> for &AffMat {
    type Output = AffMat;
    fn sub(self, o: AffMat) -> AffMat {
        self - &o
    }
}

impl Neg for &AffMat {
    type Output = AffMat;
    fn neg(self) -> AffMat {
        -self.clone()
    }
}

impl Neg for AffMat {
    type Output = AffMat;
    fn neg(self) -> AffMat {
        AffMat { rows: self.rows, cols: self.cols, coef: -self.coef }
    }
}

impl Mul<f64> for AffMat {
    type Output = AffMat;
    fn mul(self, s: f64) -> AffMat {
        AffMat { rows: self.rows, cols: self.cols, coef: self.coef * s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBlock {
    pub cone: Cone,
    pub label: String,
    /// Rows `[const | coefficients]` of the affine map whose value must lie in the cone.
    rows: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EqBlock {
    label: String,
    rows: DMatrix<f64>,
}

/// A linear objective over named variable slices with affine equality and conic constraints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    vars: Vec<VarSlice>,
    nvar: usize,
    /// Objective to minimize, `[const | coefficients]`.
    objective: Option<DVector<f64>>,
    maximize: bool,
    eqs: Vec<EqBlock>,
    cones: Vec<ConeBlock>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nvar(&self) -> usize {
        self.nvar
    }

    pub fn variables(&self) -> &[VarSlice] {
        &self.vars
    }

    pub fn add_var(&mut self, name: &str, shape: VarShape) -> VarId {
        assert!(self.vars.iter().all(|v| v.name != name), "duplicate variable {name}");
        self.vars.push(VarSlice { name: name.to_string(), shape, offset: self.nvar });
        self.nvar += shape.len();
        VarId(self.vars.len() - 1)
    }

    pub fn var_id(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    /// The variable as an affine map of the flat vector.
    pub fn expr(&self, id: VarId) -> AffMat {
        let v = &self.vars[id.0];
        let (r, c) = v.shape.dims();
        let mut coef = DMatrix::zeros(r * c, self.nvar + 1);
        match v.shape {
            VarShape::Scalar | VarShape::Matrix(..) => {
                for k in 0..r * c {
                    coef[(k, 1 + v.offset + k)] = 1.0;
                }
            }
            VarShape::Symmetric(n) => {
                let mut k = 0;
                for j in 0..n {
                    for i in j..n {
                        coef[(j * n + i, 1 + v.offset + k)] = 1.0;
                        coef[(i * n + j, 1 + v.offset + k)] = 1.0;
                        k += 1;
                    }
                }
            }
        }
        AffMat { rows: r, cols: c, coef }
    }

    pub fn minimize(&mut self, obj: &AffMat) {
        assert_eq!(obj.shape(), (1, 1), "objective must be scalar");
        self.objective = Some(obj.rows_for(self.nvar).row(0).transpose());
        self.maximize = false;
    }

    pub fn maximize(&mut self, obj: &AffMat) {
        assert_eq!(obj.shape(), (1, 1), "objective must be scalar");
        self.objective = Some(-obj.rows_for(self.nvar).row(0).transpose());
        self.maximize = true;
    }

    /// Every entry of `m` equals zero.
    pub fn add_eq_zero(&mut self, label: &str, m: &AffMat) {
        self.eqs.push(EqBlock { label: label.into(), rows: m.rows_for(self.nvar) });
    }

    /// Symmetric `m = 0`, one row per lower-triangle entry.
    pub fn add_sym_eq_zero(&mut self, label: &str, m: &AffMat) -> Result<()> {
        let rows = m.svec_rows(self.nvar)?;
        self.eqs.push(EqBlock { label: label.into(), rows });
        Ok(())
    }

    /// `m` is positive semidefinite.
    pub fn add_psd(&mut self, label: &str, m: &AffMat) -> Result<()> {
        let rows = m.svec_rows(self.nvar)?;
        self.cones.push(ConeBlock { cone: Cone::Psd(m.rows), label: label.into(), rows });
        Ok(())
    }

    /// `m - eps I` is positive semidefinite.
    pub fn add_psd_shifted(&mut self, label: &str, m: &AffMat, eps: f64) -> Result<()> {
        let n = m.rows;
        self.add_psd(label, &(m - &AffMat::constant(&(DMatrix::identity(n, n) * eps))))
    }

    /// `||vec(z)|| <= t`
    pub fn add_soc(&mut self, label: &str, t: &AffMat, z: &AffMat) {
        assert_eq!(t.shape(), (1, 1), "SOC bound must be scalar");
        let zr = z.rows_for(self.nvar);
        let tr = t.rows_for(self.nvar);
        let mut rows = DMatrix::zeros(1 + zr.nrows(), self.nvar + 1);
        rows.row_mut(0).copy_from(&tr.row(0));
        rows.rows_mut(1, zr.nrows()).copy_from(&zr);
        self.cones.push(ConeBlock { cone: Cone::Soc(rows.nrows()), label: label.into(), rows });
    }

    /// Every entry of `m` is non-negative.
    pub fn add_nonneg(&mut self, label: &str, m: &AffMat) {
        let rows = m.rows_for(self.nvar);
        self.cones.push(ConeBlock { cone: Cone::Nonneg(rows.nrows()), label: label.into(), rows });
    }

    /// Epigraph of the Frobenius norm: declares `t` with `||expr||_F <= t` and returns `t`.
    pub fn epigraph_frobenius(&mut self, name: &str, expr: &AffMat) -> AffMat {
        let id = self.add_var(name, VarShape::Scalar);
        let t = self.expr(id);
        self.add_soc(&format!("epigraph:{name}"), &t, expr);
        t
    }

    /// Dense canonical data `min c'x  s.t.  Ax = b,  h - Gx in K`.
    pub fn canonical(&self) -> ipm::Canonical {
        let nv = self.nvar;
        let pad = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut out = DMatrix::zeros(m.nrows(), nv + 1);
            out.columns_mut(0, m.ncols()).copy_from(m);
            out
        };
        let obj = self.objective.clone().unwrap_or_else(|| DVector::zeros(nv + 1));
        let mut c = DVector::zeros(nv);
        c.rows_mut(0, obj.len() - 1).copy_from(&obj.rows(1, obj.len() - 1));
        let neq: usize = self.eqs.iter().map(|e| e.rows.nrows()).sum();
        let mut a = DMatrix::zeros(neq, nv);
        let mut b = DVector::zeros(neq);
        let mut r = 0;
        for e in &self.eqs {
            let rows = pad(&e.rows);
            let k = rows.nrows();
            a.rows_mut(r, k).copy_from(&rows.columns(1, nv));
            b.rows_mut(r, k).copy_from(&(-rows.column(0)));
            r += k;
        }
        let ncone: usize = self.cones.iter().map(|c| c.rows.nrows()).sum();
        let mut g = DMatrix::zeros(ncone, nv);
        let mut h = DVector::zeros(ncone);
        let mut r = 0;
        for blk in &self.cones {
            let rows = pad(&blk.rows);
            let k = rows.nrows();
            g.rows_mut(r, k).copy_from(&(-rows.columns(1, nv)));
            h.rows_mut(r, k).copy_from(&rows.column(0));
            r += k;
        }
        ipm::Canonical {
            c,
            a,
            b,
            g,
            h,
            cones: self.cones.iter().map(|c| c.cone).collect(),
        }
    }

    pub fn solve(&self, settings: &SolverSettings) -> ConicSolution {
        let data = self.canonical();
        let raw = ipm::solve(&data, settings);
        let objective_const = self.objective.as_ref().map_or(0.0, |o| o[0]);
        let mut objective_value = data.c.dot(&raw.x) + objective_const;
        if self.maximize {
            objective_value = -objective_value;
        }
        let max_constraint_violation = data.violation(&raw.x);
        let mut values = BTreeMap::new();
        for v in &self.vars {
            values.insert(v.name.clone(), self.slice_value(v, &raw.x));
        }
        ConicSolution {
            status: raw.status,
            x: raw.x,
            values,
            objective_value,
            max_constraint_violation,
            iterations: raw.iterations,
            primal_residual: raw.pres,
            dual_residual: raw.dres,
            gap: raw.gap,
        }
    }

    fn slice_value(&self, v: &VarSlice, x: &DVector<f64>) -> DMatrix<f64> {
        let (r, c) = v.shape.dims();
        match v.shape {
            VarShape::Scalar | VarShape::Matrix(..) => DMatrix::from_column_slice(r, c, &x.as_slice()[v.offset..v.offset + r * c]),
            VarShape::Symmetric(n) => {
                let mut m = DMatrix::zeros(n, n);
                let mut k = v.offset;
                for j in 0..n {
                    for i in j..n {
                        m[(i, j)] = x[k];
                        m[(j, i)] = x[k];
                        k += 1;
                    }
                }
                m
            }
        }
    }

    /// Structured-text dump (JSON): variable layout, objective vector, constraint triplets, cones.
    pub fn dump(&self) -> String {
        let data = self.canonical();
        let triplets = |m: &DMatrix<f64>| -> Vec<(usize, usize, f64)> {
            let mut out = Vec::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if m[(i, j)] != 0.0 {
                        out.push((i, j, m[(i, j)]));
                    }
                }
            }
            out
        };
        let doc = serde_json::json!({
            "form": "minimize c'x subject to A x = b, h - G x in K (PSD blocks in scaled svec)",
            "variables": self.vars,
            "n": data.c.len(),
            "c": data.c.as_slice(),
            "A": {"rows": data.a.nrows(), "triplets": triplets(&data.a)},
            "b": data.b.as_slice(),
            "G": {"rows": data.g.nrows(), "triplets": triplets(&data.g)},
            "h": data.h.as_slice(),
            "cones": self.cones.iter().map(|c| serde_json::json!({"label": c.label, "cone": c.cone})).collect::<Vec<_>>(),
            "equalities": self.eqs.iter().map(|e| serde_json::json!({"label": e.label, "rows": e.rows.nrows()})).collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).expect("program dump")
    }
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: Status,
    pub x: DVector<f64>,
    pub values: BTreeMap<String, DMatrix<f64>>,
    pub objective_value: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

impl ConicSolution {
    pub fn value(&self, name: &str) -> &DMatrix<f64> {
        self.values.get(name).unwrap_or_else(|| panic!("no variable named {name}"))
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.value(name)[(0, 0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_products_match_dense_algebra() {
        let mut prog = ConicProgram::new();
        let p = prog.add_var("P", VarShape::Symmetric(2));
        let n = prog.add_var("N", VarShape::Matrix(1, 2));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.7, -1.1]);
        let x = DVector::from_vec(vec![2.0, 0.5, 3.0, -1.0, 4.0]);
        let pv = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        let nv = DMatrix::from_row_slice(1, 2, &[-1.0, 4.0]);
        let e = prog.expr(p).sandwich(&a.transpose(), &b) + prog.expr(n).t();
        let want = a.transpose() * &pv * &b + nv.transpose();
        assert!((e.eval(&x) - want).norm() < 1e-14);
        let blk = AffMat::block(&[
            vec![Some(prog.expr(p)), Some(prog.expr(n).t())],
            vec![Some(prog.expr(n)), None],
        ]);
        let v = blk.eval(&x);
        assert_eq!(v.shape(), (3, 3));
        assert_eq!(v[(2, 1)], 4.0);
        assert_eq!(v[(1, 2)], 4.0);
        assert_eq!(v[(2, 2)], 0.0);
        assert!((prog.expr(p).trace().eval(&x)[(0, 0)] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn psd_rejects_asymmetric_map() {
        let mut prog = ConicProgram::new();
        let n = prog.add_var("N", VarShape::Matrix(2, 2));
        assert!(prog.add_psd("bad", &prog.expr(n)).is_err());
    }
}
