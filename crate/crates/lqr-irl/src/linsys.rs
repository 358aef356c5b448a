//! Plant models, simulation, Riccati solves and stability checks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed loops with spectral radius below this are classified stable.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Discrete-time plant `x(k+1) = A x(k) + B u(k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::shape(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::shape(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `[B, AB, ..., A^{n-1}B]`
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(n, n * m);
        let mut blk = self.b.clone();
        for i in 0..n {
            out.view_mut((0, i * m), (n, m)).copy_from(&blk);
            blk = &self.a * blk;
        }
        out
    }

    /// Rank test with SVD cutoff `tol * sigma_max`.
    pub fn is_controllable(&self, tol: f64) -> bool {
        numerical_rank(&self.controllability_matrix(), tol) == self.n()
    }

    fn check_gain(&self, k: &DMatrix<f64>) -> Result<()> {
        if k.nrows() != self.m() || k.ncols() != self.n() {
            return Err(Error::shape(format!(
                "gain must be {}x{}, got {}x{}",
                self.m(),
                self.n(),
                k.nrows(),
                k.ncols()
            )));
        }
        Ok(())
    }
}

/// Generalized stage cost `x'Qx + 2u'Nx + u'Ru`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n_cross: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, n_cross: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        let m = r.nrows();
        if q.ncols() != n || r.ncols() != m || n_cross.shape() != (m, n) {
            return Err(Error::shape(format!(
                "cost shapes inconsistent: Q {:?}, R {:?}, N {:?}",
                q.shape(),
                r.shape(),
                n_cross.shape()
            )));
        }
        if asymmetry(&q) > 1e-12 * (1.0 + q.norm()) || asymmetry(&r) > 1e-12 * (1.0 + r.norm()) {
            return Err(Error::invalid("Q and R must be symmetric"));
        }
        if r.clone().symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::NotPositiveDefinite("R".into()));
        }
        let cost = Self { q, r, n_cross };
        let lo = cost.block().symmetric_eigenvalues().min();
        if lo < -1e-9 * (1.0 + cost.block().norm()) {
            return Err(Error::invalid(format!("cost block [[Q, N'],[N, R]] is not PSD (min eig {lo:e})")));
        }
        Ok(cost)
    }

    /// Standard LQR weights, `N = 0`.
    pub fn standard(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let nc = DMatrix::zeros(r.nrows(), q.nrows());
        Self::new(q, r, nc)
    }

    pub fn block(&self) -> DMatrix<f64> {
        let (n, m) = (self.q.nrows(), self.r.nrows());
        let mut out = DMatrix::zeros(n + m, n + m);
        out.view_mut((0, 0), (n, n)).copy_from(&self.q);
        out.view_mut((n, n), (m, m)).copy_from(&self.r);
        out.view_mut((n, 0), (m, n)).copy_from(&self.n_cross);
        out.view_mut((0, n), (n, m)).copy_from(&self.n_cross.transpose());
        out
    }
}

/// State feedback `u = K x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
}

impl FeedbackGain {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self { k: DMatrix::zeros(m, n) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueMatrix {
    pub p: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

pub enum Policy<'a> {
    Gain(&'a FeedbackGain),
    Inputs(&'a [DVector<f64>]),
}

pub fn simulate(sys: &LinearSystem, policy: Policy<'_>, x0: &DVector<f64>, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if x0.len() != sys.n() {
        return Err(Error::shape(format!("x0 has length {}, expected {}", x0.len(), sys.n())));
    }
    match &policy {
        Policy::Gain(g) => sys.check_gain(&g.k)?,
        Policy::Inputs(us) => {
            if us.len() < steps {
                return Err(Error::shape(format!("{} inputs supplied for {} steps", us.len(), steps)));
            }
            if let Some(u) = us.iter().find(|u| u.len() != sys.m()) {
                return Err(Error::shape(format!("input of length {}, expected {}", u.len(), sys.m())));
            }
        }
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for k in 0..steps {
        let u = match &policy {
            Policy::Gain(g) => &g.k * &x,
            Policy::Inputs(us) => us[k].clone(),
        };
        let next = &sys.a * &x + &sys.b * &u;
        states.push(x);
        inputs.push(u);
        x = next;
    }
    states.push(x);
    Ok(Trajectory { states, inputs })
}

/// `A + B K`
pub fn closed_loop(sys: &LinearSystem, gain: &FeedbackGain) -> Result<DMatrix<f64>> {
    sys.check_gain(&gain.k)?;
    Ok(&sys.a + &sys.b * &gain.k)
}

pub fn spectral_radius(mat: &DMatrix<f64>) -> Result<f64> {
    if !mat.is_square() {
        return Err(Error::shape(format!("spectral radius of a {}x{} matrix", mat.nrows(), mat.ncols())));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral radius input".into()));
    }
    Ok(mat.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max))
}

pub fn is_stable(mat: &DMatrix<f64>) -> Result<bool> {
    Ok(spectral_radius(mat)? < 1.0 - STABILITY_MARGIN)
}

#[derive(Clone, Copy, Debug)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50_000 }
    }
}

/// `K = -(R + B'PB)^{-1}(B'PA + N)`
pub fn gain_from_value(sys: &LinearSystem, cost: &CostWeights, p: &DMatrix<f64>) -> Result<FeedbackGain> {
    let s = &cost.r + sys.b.transpose() * p * &sys.b;
    let rhs = sys.b.transpose() * p * &sys.a + &cost.n_cross;
    let k = s
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("R + B'PB".into()))?;
    Ok(FeedbackGain::new(-k))
}

fn riccati_map(sys: &LinearSystem, cost: &CostWeights, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let at = sys.a.transpose();
    let bt = sys.b.transpose();
    let s = &cost.r + &bt * p * &sys.b;
    let l = &bt * p * &sys.a + &cost.n_cross;
    let sol = s.cholesky()?.solve(&l);
    let next = &cost.q + &at * p * &sys.a - l.transpose() * sol;
    Some(symmetrize(&next))
}

/// Generalized DARE residual norm at `p`.
pub fn dare_residual(sys: &LinearSystem, cost: &CostWeights, p: &DMatrix<f64>) -> f64 {
    match riccati_map(sys, cost, p) {
        Some(next) => (p - next).norm(),
        None => f64::INFINITY,
    }
}

pub fn solve_dare(sys: &LinearSystem, cost: &CostWeights) -> Result<(ValueMatrix, FeedbackGain)> {
    solve_dare_with(sys, cost, DareOptions::default())
}

/// Fixed-point Riccati iteration from `P0 = Q`.
pub fn solve_dare_with(sys: &LinearSystem, cost: &CostWeights, opts: DareOptions) -> Result<(ValueMatrix, FeedbackGain)> {
    let (n, m) = (sys.n(), sys.m());
    if cost.q.shape() != (n, n) || cost.r.shape() != (m, m) || cost.n_cross.shape() != (m, n) {
        return Err(Error::shape("cost weights do not match system dimensions"));
    }
    if cost.r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R".into()));
    }
    let mut p = cost.q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = riccati_map(sys, cost, &p).ok_or_else(|| Error::NotPositiveDefinite("R + B'PB".into()))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iterations: 0, change: f64::INFINITY });
        }
        change = (&next - &p).norm();
        p = next;
        if change <= opts.tol * (1.0 + p.norm()).max(1.0) {
            let gain = gain_from_value(sys, cost, &p)?;
            let f = closed_loop(sys, &gain)?;
            if !is_stable(&f)? {
                return Err(Error::Divergence { iterations: opts.max_iter, change });
            }
            return Ok((ValueMatrix { p }, gain));
        }
    }
    Err(Error::Divergence { iterations: opts.max_iter, change })
}

/// Solves `X = F X F' + Y` by vectorization.
pub fn solve_stein(f: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let kron = f.kronecker(f);
    let lhs = DMatrix::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(y.as_slice());
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("Stein equation is singular"))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = crate::linalg::singular_values(m);
    if sv.is_empty() {
        return 0;
    }
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

/// Power-system case study: three-state plant, scalar input.
pub mod power_system {
    use super::*;

    pub fn a() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0.882, 0.001, 0.046, 0.111, 0.904, 0.002, 0.003, 0.057, 0.999])
    }

    pub fn b() -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 1, &[0.117, 0.007, 0.0])
    }

    pub fn system() -> LinearSystem {
        LinearSystem::new(a(), b()).expect("fixture shapes")
    }

    /// `Q_e = I_3`, `R_e = 1`.
    pub fn expert_cost() -> CostWeights {
        CostWeights::standard(DMatrix::identity(3, 3), DMatrix::identity(1, 1)).expect("fixture cost")
    }

    /// Three-decimal reference gain; only usable as a loose sanity check.
    pub fn rounded_gain() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[-0.869, -0.807, -1.395])
    }

    pub fn expert_gain() -> FeedbackGain {
        solve_dare(&system(), &expert_cost()).expect("fixture DARE").1
    }

    pub fn initial_state() -> DVector<f64> {
        DVector::from_element(3, 1.0)
    }
}
