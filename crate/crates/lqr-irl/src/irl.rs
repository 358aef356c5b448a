//! Inverse-LQR programs: recover `(P, Q, N, K)` from an estimated expert gain.
//!
//! Every builder returns an [`IrlResult`] even when the solver reports infeasibility, so that
//! sweeps can record the outcome per cell.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{AffMat, ConicProgram, ConicSolution, SolverSettings, Status, VarShape};
use crate::error::{Error, Result};
use crate::estimation::{excitation_check, RegressedModel, TrajectoryBatch};
use crate::linsys::{
    is_stable, solve_dare, solve_stein, spectral_radius, symmetrize, CostWeights, FeedbackGain, LinearSystem, ValueMatrix,
};

/// Violation above which an "optimal" answer is still classified as infeasible.
pub const INF_VIOLATION: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Feasibility,
    Relaxed,
    Merged,
    SingleVariable,
    ModelFree,
    Generalized,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Feasibility => "feasibility",
            Method::Relaxed => "relaxed",
            Method::Merged => "merged",
            Method::SingleVariable => "single-variable",
            Method::ModelFree => "model-free",
            Method::Generalized => "generalized",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Feasibility,
            Method::Relaxed,
            Method::Merged,
            Method::SingleVariable,
            Method::ModelFree,
            Method::Generalized,
        ]
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlOptions {
    /// Shift for strict inequalities (`X > 0` becomes `X >= eps I`).
    pub eps: f64,
    pub w1: f64,
    pub w2: f64,
    pub solver: SolverSettings,
}

impl Default for IrlOptions {
    fn default() -> Self {
        Self { eps: 1e-8, w1: 1.0, w2: 1.0, solver: SolverSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub h_xx: DMatrix<f64>,
    pub h_xu: DMatrix<f64>,
    pub h_uu: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn from_full(h: &DMatrix<f64>, n: usize) -> Self {
        let m = h.nrows() - n;
        Self {
            h_xx: h.view((0, 0), (n, n)).into_owned(),
            h_xu: h.view((0, n), (n, m)).into_owned(),
            h_uu: h.view((n, n), (m, m)).into_owned(),
        }
    }

    /// `[[A'PA, A'PB], [B'PA, B'PB]]`
    pub fn model_based(sys: &LinearSystem, p: &DMatrix<f64>) -> Self {
        let (a, b) = (&sys.a, &sys.b);
        Self {
            h_xx: a.transpose() * p * a,
            h_xu: a.transpose() * p * b,
            h_uu: b.transpose() * p * b,
        }
    }

    pub fn assembled(&self) -> DMatrix<f64> {
        let (n, m) = (self.h_xx.nrows(), self.h_uu.nrows());
        let mut h = DMatrix::zeros(n + m, n + m);
        h.view_mut((0, 0), (n, n)).copy_from(&self.h_xx);
        h.view_mut((0, n), (n, m)).copy_from(&self.h_xu);
        h.view_mut((n, 0), (m, n)).copy_from(&self.h_xu.transpose());
        h.view_mut((n, n), (m, m)).copy_from(&self.h_uu);
        h
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IrlResult {
    pub method: Method,
    pub status: Status,
    pub p_star: DMatrix<f64>,
    pub q_star: DMatrix<f64>,
    pub n_star: DMatrix<f64>,
    pub k_star: DMatrix<f64>,
    /// Norm of the gain-matching residual of the method, evaluated at the solution.
    pub residual_gain_match: f64,
    pub max_constraint_violation: f64,
    /// `Q*` has no eigenvalue below `-1e-7`.
    pub q_psd: bool,
    /// `K*` stabilizes the model the program was built on.
    pub stabilizing: bool,
    pub kernel: Option<KernelMatrix>,
    pub iterations: usize,
    pub wall_clock_s: f64,
}

impl IrlResult {
    fn failed(method: Method, status: Status, n: usize, m: usize, sol: &ConicSolution, started: Instant) -> Self {
        let nan = |r, c| DMatrix::from_element(r, c, f64::NAN);
        Self {
            method,
            status,
            p_star: nan(n, n),
            q_star: nan(n, n),
            n_star: nan(m, n),
            k_star: nan(m, n),
            residual_gain_match: f64::NAN,
            max_constraint_violation: sol.max_constraint_violation,
            q_psd: false,
            stabilizing: false,
            kernel: None,
            iterations: sol.iterations,
            wall_clock_s: started.elapsed().as_secs_f64(),
        }
    }

    /// Infeasible, or "optimal" with a constraint violation above [`INF_VIOLATION`].
    pub fn is_inf(&self) -> bool {
        self.status == Status::Infeasible || (self.status == Status::Optimal && self.max_constraint_violation > INF_VIOLATION)
    }

    pub fn gain_error(&self, reference: &DMatrix<f64>) -> f64 {
        (&self.k_star - reference).norm()
    }

    pub fn value(&self) -> ValueMatrix {
        ValueMatrix { p: self.p_star.clone() }
    }

    pub fn gain(&self) -> FeedbackGain {
        FeedbackGain::new(self.k_star.clone())
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

fn check_inputs(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>) -> Result<()> {
    let (n, m) = (sys.n(), sys.m());
    if r.shape() != (m, m) || k_hat.shape() != (m, n) {
        return Err(Error::shape(format!("expected R {m}x{m} and K {m}x{n}")));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R".into()));
    }
    Ok(())
}

/// `(R + B'PB) K + B'PA`
fn f2_expr(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, p: &AffMat) -> AffMat {
    let (a, b) = (&sys.a, &sys.b);
    (p.sandwich(&b.transpose(), b) + AffMat::constant(r)).rmul(k_hat) + p.sandwich(&b.transpose(), a)
}

/// `P - Q - K'RK - F'PF`
fn f1_expr(r: &DMatrix<f64>, k_hat: &DMatrix<f64>, f_hat: &DMatrix<f64>, p: &AffMat, q: &AffMat) -> AffMat {
    p - q - AffMat::constant(&(k_hat.transpose() * r * k_hat)) - p.sandwich(&f_hat.transpose(), f_hat)
}

/// `[[A'PA + Q - P, A'PB], [B'PA, B'PB + R]]`
fn riccati_lmi(sys: &LinearSystem, r: &DMatrix<f64>, p: &AffMat, q: &AffMat) -> AffMat {
    let (a, b) = (&sys.a, &sys.b);
    let tl = p.sandwich(&a.transpose(), a) + q - p;
    let tr = p.sandwich(&a.transpose(), b);
    let br = p.sandwich(&b.transpose(), b) + AffMat::constant(r);
    AffMat::block(&[vec![Some(tl), Some(tr.clone())], vec![Some(tr.t()), Some(br)]])
}

/// `K = -(R + B'PB)^{-1}(B'PA + N)` and `Q = P - A'PA + (A'PB + N')(R + B'PB)^{-1}(B'PA + N)`.
fn recover(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, n_cross: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = r + b.transpose() * p * b;
    let l = b.transpose() * p * a + n_cross;
    let sol = s.lu().solve(&l).ok_or_else(|| Error::NotPositiveDefinite("R + B'PB".into()))?;
    let q = symmetrize(&(p - a.transpose() * p * a + l.transpose() * &sol));
    Ok((-sol, q))
}

struct Finish<'a> {
    method: Method,
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    started: Instant,
}

impl Finish<'_> {
    fn build(
        &self,
        sol: &ConicSolution,
        p: DMatrix<f64>,
        q: DMatrix<f64>,
        n_cross: DMatrix<f64>,
        k: DMatrix<f64>,
        residual: f64,
        kernel: Option<KernelMatrix>,
    ) -> IrlResult {
        let f = self.a + self.b * &k;
        let stabilizing = is_stable(&f).unwrap_or(false);
        IrlResult {
            method: self.method,
            status: sol.status,
            q_psd: min_eig(&q) >= -1e-7,
            p_star: p,
            q_star: q,
            n_star: n_cross,
            k_star: k,
            residual_gain_match: residual,
            max_constraint_violation: sol.max_constraint_violation,
            stabilizing,
            kernel,
            iterations: sol.iterations,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        }
    }
}

/// Finds `(P, Q)` with `P = Q + K'RK + F'PF`, `(R + B'PB)K = -B'PA`, `Q >= 0`, `P > 0`.
pub fn irl_feasibility(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, f_hat: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    check_inputs(sys, r, k_hat)?;
    let started = Instant::now();
    let n = sys.n();
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let q = {
        let id = prog.add_var("Q", VarShape::Symmetric(n));
        prog.expr(id)
    };
    prog.add_sym_eq_zero("value", &f1_expr(r, k_hat, f_hat, &p, &q))?;
    prog.add_eq_zero("gain", &f2_expr(sys, r, k_hat, &p));
    prog.add_psd("Q", &q)?;
    prog.add_psd_shifted("P", &p, opts.eps)?;
    prog.minimize(&AffMat::scalar(0.0));
    finish_standard(Method::Feasibility, sys, r, k_hat, &prog, opts, started)
}

/// Minimizes `w1 ||f1(P, Q)|| + w2 ||f2(P)||` subject to `Q >= 0`, `P > 0`.
pub fn irl_relaxed(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, f_hat: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    check_inputs(sys, r, k_hat)?;
    if !(opts.w1 > 0.0 && opts.w2 > 0.0) {
        return Err(Error::invalid("weights must be positive"));
    }
    let started = Instant::now();
    let n = sys.n();
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let q = {
        let id = prog.add_var("Q", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let t1 = prog.epigraph_frobenius("t1", &f1_expr(r, k_hat, f_hat, &p, &q));
    let t2 = prog.epigraph_frobenius("t2", &f2_expr(sys, r, k_hat, &p));
    prog.add_psd("Q", &q)?;
    prog.add_psd_shifted("P", &p, opts.eps)?;
    prog.minimize(&(t1 * opts.w1 + t2 * opts.w2));
    finish_standard(Method::Relaxed, sys, r, k_hat, &prog, opts, started)
}

/// Maximizes `tr P` subject to `Q >= 0`, `P > 0`, the Riccati LMI, `f1 = 0` and `f2 = 0`.
///
/// Under `f1 = f2 = 0` the Schur complement of the Riccati LMI vanishes identically, so that
/// block is imposed as `>= 0` rather than shifted by `eps`.
pub fn irl_merged(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, f_hat: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    check_inputs(sys, r, k_hat)?;
    let started = Instant::now();
    let n = sys.n();
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let q = {
        let id = prog.add_var("Q", VarShape::Symmetric(n));
        prog.expr(id)
    };
    prog.add_psd("Q", &q)?;
    prog.add_psd_shifted("P", &p, opts.eps)?;
    prog.add_psd("riccati", &riccati_lmi(sys, r, &p, &q))?;
    prog.add_sym_eq_zero("value", &f1_expr(r, k_hat, f_hat, &p, &q))?;
    prog.add_eq_zero("gain", &f2_expr(sys, r, k_hat, &p));
    prog.maximize(&p.trace());
    finish_standard(Method::Merged, sys, r, k_hat, &prog, opts, started)
}

/// Minimizes `||f2(P)||` over `P > 0` with `P - K'RK - (A + BK)'P(A + BK) >= 0`, then recovers
/// `Q*` and `K*` from `P*` alone.
///
/// The constraint keeps the recovered `Q*` PSD: `Q(P)` equals the left-hand side plus
/// `(K - K(P))'(R + B'PB)(K - K(P))`.
pub fn irl_single_variable(sys: &LinearSystem, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    check_inputs(sys, r, k_hat)?;
    let started = Instant::now();
    let n = sys.n();
    let f_hat = &sys.a + &sys.b * k_hat;
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    prog.add_psd_shifted("P", &p, opts.eps)?;
    let lyap = &p - AffMat::constant(&(k_hat.transpose() * r * k_hat)) - p.sandwich(&f_hat.transpose(), &f_hat);
    prog.add_psd("value", &lyap)?;
    let t = prog.epigraph_frobenius("t", &f2_expr(sys, r, k_hat, &p));
    prog.minimize(&t);
    let sol = prog.solve(&opts.solver);
    let m = sys.m();
    if sol.status != Status::Optimal {
        return Ok(IrlResult::failed(Method::SingleVariable, sol.status, n, m, &sol, started));
    }
    let p = symmetrize(sol.value("P"));
    let zero_n = DMatrix::zeros(m, n);
    let (k, q) = recover(&sys.a, &sys.b, r, &zero_n, &p)?;
    let residual = ((r + sys.b.transpose() * &p * &sys.b) * k_hat + sys.b.transpose() * &p * &sys.a).norm();
    let fin = Finish { method: Method::SingleVariable, a: &sys.a, b: &sys.b, started };
    Ok(fin.build(&sol, p, q, zero_n, k, residual, None))
}

fn finish_standard(
    method: Method,
    sys: &LinearSystem,
    r: &DMatrix<f64>,
    k_hat: &DMatrix<f64>,
    prog: &ConicProgram,
    opts: &IrlOptions,
    started: Instant,
) -> Result<IrlResult> {
    let sol = prog.solve(&opts.solver);
    let (n, m) = (sys.n(), sys.m());
    if sol.status != Status::Optimal {
        return Ok(IrlResult::failed(method, sol.status, n, m, &sol, started));
    }
    let p = symmetrize(sol.value("P"));
    let q = symmetrize(sol.value("Q"));
    let zero_n = DMatrix::zeros(m, n);
    let (k, _) = recover(&sys.a, &sys.b, r, &zero_n, &p)?;
    let residual = ((r + sys.b.transpose() * &p * &sys.b) * k_hat + sys.b.transpose() * &p * &sys.a).norm();
    let fin = Finish { method, a: &sys.a, b: &sys.b, started };
    Ok(fin.build(&sol, p, q, zero_n, k, residual, None))
}

/// Model-free program over `(P, H)`: minimizes `||(H_uu + R)K + H_xu'||` subject to `P > 0`,
/// `P - K'RK - [I; K]'H[I; K] >= 0` and `x(k+1)'P x(k+1) = z'Hz` for every data column
/// `z = [x(k); u(k)]`.
pub fn irl_model_free(data: &TrajectoryBatch, r: &DMatrix<f64>, k_hat: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    let (n, m) = (data.n(), data.m());
    if r.shape() != (m, m) || k_hat.shape() != (m, n) {
        return Err(Error::shape(format!("expected R {m}x{m} and K {m}x{n}")));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("R".into()));
    }
    let report = excitation_check(data);
    if !report.passes {
        return Err(Error::Excitation { rank: report.gramian_rank, required: report.required_rank });
    }
    let started = Instant::now();
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let h = {
        let id = prog.add_var("H", VarShape::Symmetric(n + m));
        prog.expr(id)
    };
    let h_xu = h.sub_block(0, n, n, m);
    let h_uu = h.sub_block(n, n, m, m);
    prog.add_psd_shifted("P", &p, opts.eps)?;
    let mut ik = DMatrix::zeros(n + m, n);
    ik.view_mut((0, 0), (n, n)).fill_with_identity();
    ik.view_mut((n, 0), (m, n)).copy_from(k_hat);
    let value = &p - AffMat::constant(&(k_hat.transpose() * r * k_hat)) - h.sandwich(&ik.transpose(), &ik);
    prog.add_psd("value", &value)?;
    let z = data.stacked();
    for j in 0..data.n_d() {
        let xp = data.x_k1.column(j).into_owned();
        let zj = z.column(j).into_owned();
        let lhs = p.sandwich(&DMatrix::from_row_slice(1, n, xp.as_slice()), &DMatrix::from_column_slice(n, 1, xp.as_slice()));
        let rhs = h.sandwich(&DMatrix::from_row_slice(1, n + m, zj.as_slice()), &DMatrix::from_column_slice(n + m, 1, zj.as_slice()));
        prog.add_eq_zero(&format!("data[{j}]"), &(lhs - rhs));
    }
    let residual_expr = (h_uu + AffMat::constant(r)).rmul(k_hat) + h_xu.t();
    let t = prog.epigraph_frobenius("t", &residual_expr);
    prog.minimize(&t);
    let sol = prog.solve(&opts.solver);
    if sol.status != Status::Optimal {
        return Ok(IrlResult::failed(Method::ModelFree, sol.status, n, m, &sol, started));
    }
    let p = symmetrize(sol.value("P"));
    let hm = symmetrize(sol.value("H"));
    let kernel = KernelMatrix::from_full(&hm, n);
    let s = &kernel.h_uu + r;
    let sol_k = s
        .clone()
        .lu()
        .solve(&kernel.h_xu.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("H_uu + R".into()))?;
    let k = -&sol_k;
    let q = symmetrize(&(&p - &kernel.h_xx + &kernel.h_xu * &sol_k));
    let residual = (&s * k_hat + kernel.h_xu.transpose()).norm();
    // Closed loop through the data: [M1 M2] = X+ Z' (Z Z')^+.
    let model = crate::estimation::regress_model(data)?;
    let fin = Finish { method: Method::ModelFree, a: &model.m1, b: &model.m2, started };
    Ok(fin.build(&sol, p, q, DMatrix::zeros(m, n), k, residual, Some(kernel)))
}

/// Generalized program over `(P, N)` on the regressed model: minimizes
/// `||(M2'PM2 + R)K + M2'PM1 + N||` subject to `P > 0` and
/// `[[P - F'PF, (N + RK)'], [N + RK, R]] >= 0` with `F = M1 + M2 K`.
///
/// The constraint keeps the recovered cost block `[[Q*, N*'], [N*, R]]` PSD.
pub fn irl_uncertain(model: &RegressedModel, r: &DMatrix<f64>, k_tar: &DMatrix<f64>, opts: &IrlOptions) -> Result<IrlResult> {
    let sys = model.as_system()?;
    check_inputs(&sys, r, k_tar)?;
    let started = Instant::now();
    let (n, m) = (sys.n(), sys.m());
    let (m1, m2) = (&model.m1, &model.m2);
    let f_hat = m1 + m2 * k_tar;
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(n));
        prog.expr(id)
    };
    let nv = {
        let id = prog.add_var("N", VarShape::Matrix(m, n));
        prog.expr(id)
    };
    prog.add_psd_shifted("P", &p, opts.eps)?;
    let off = &nv + AffMat::constant(&(r * k_tar));
    let tl = &p - p.sandwich(&f_hat.transpose(), &f_hat);
    let lmi = AffMat::block(&[vec![Some(tl), Some(off.t())], vec![Some(off), Some(AffMat::constant(r))]]);
    prog.add_psd("cost", &lmi)?;
    let f3 = (p.sandwich(&m2.transpose(), m2) + AffMat::constant(r)).rmul(k_tar) + p.sandwich(&m2.transpose(), m1) + &nv;
    let t = prog.epigraph_frobenius("t", &f3);
    prog.minimize(&t);
    let sol = prog.solve(&opts.solver);
    if sol.status != Status::Optimal {
        return Ok(IrlResult::failed(Method::Generalized, sol.status, n, m, &sol, started));
    }
    let p = symmetrize(sol.value("P"));
    let n_cross = sol.value("N").clone();
    let (k, q) = recover(m1, m2, r, &n_cross, &p)?;
    let residual = ((m2.transpose() * &p * m2 + r) * k_tar + m2.transpose() * &p * m1 + &n_cross).norm();
    let fin = Finish { method: Method::Generalized, a: m1, b: m2, started };
    Ok(fin.build(&sol, p, q, n_cross, k, residual, None))
}

/// Expert gain perturbed to `K + delta E / ||E||_F`.
pub fn perturbed_gain(k: &DMatrix<f64>, delta: f64, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let norm = e.norm();
    if delta != 0.0 && !(norm > 0.0) {
        return Err(Error::invalid("perturbation direction must be nonzero"));
    }
    if delta == 0.0 {
        return Ok(k.clone());
    }
    Ok(k + e * (delta / norm))
}

/// Cost `(Q, R, N)` making a stabilizing `K` optimal for `(A, B)`: `P` solves
/// `(A + BK)'P(A + BK) - P = -W`, `S = R + B'PB`, `N = -SK - B'PA`, `Q = P - A'PA + K'SK`.
pub fn generalized_cost_for_gain(sys: &LinearSystem, k: &DMatrix<f64>, r: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<(CostWeights, DMatrix<f64>)> {
    check_inputs(sys, r, k)?;
    let f = &sys.a + &sys.b * k;
    if !is_stable(&f)? {
        return Err(Error::invalid("gain is not stabilizing"));
    }
    let p = symmetrize(&solve_stein(&f.transpose(), w)?);
    let s = r + sys.b.transpose() * &p * &sys.b;
    let n_cross = -(&s * k) - sys.b.transpose() * &p * &sys.a;
    let q = symmetrize(&(&p - sys.a.transpose() * &p * &sys.a + k.transpose() * &s * k));
    Ok((CostWeights::new(q, r.clone(), n_cross)?, p))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationarityCheck {
    pub r: f64,
    pub status: Status,
}

/// Fixture of a stabilizing gain that no standard LQR cost explains, with its certificates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WitnessCertificate {
    pub system: LinearSystem,
    pub gain: DMatrix<f64>,
    pub closed_loop_eigenvalues: Vec<f64>,
    pub spectral_radius: f64,
    pub stationarity: Vec<StationarityCheck>,
    /// Generalized cost built with `W = I`, `R = 1`, and its round-trip gain error.
    pub generalized_cost: CostWeights,
    pub generalized_gain_error: f64,
}

pub fn witness_system() -> LinearSystem {
    LinearSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).expect("valid witness")
}

pub fn witness_gain() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 2, &[0.0, -0.25])
}

/// Conic certificate that `(R + B'PB)K = -B'PA` has no solution with `P > 0` and `R` on the ray
/// through `r0`.
///
/// Both conditions are invariant under `(P, R) -> (cP, cR)`, so the program uses `P >= I` and
/// `R = rho r0` with `rho >= 1`. The strict version at margin `eps` is below solver tolerance.
pub fn stationarity_status(sys: &LinearSystem, k: &DMatrix<f64>, r0: &DMatrix<f64>, opts: &IrlOptions) -> Result<Status> {
    check_inputs(sys, r0, k)?;
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(sys.n()));
        prog.expr(id)
    };
    let rho = {
        let id = prog.add_var("rho", VarShape::Scalar);
        prog.expr(id)
    };
    let eig = symmetrize(r0).symmetric_eigen();
    let mut r = AffMat::zeros(sys.m(), sys.m());
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i).into_owned();
        let col = DMatrix::from_column_slice(sys.m(), 1, v.as_slice());
        r = r + rho.sandwich(&col, &col.transpose()) * *lambda;
    }
    let (a, b) = (&sys.a, &sys.b);
    let f2 = (p.sandwich(&b.transpose(), b) + r).rmul(k) + p.sandwich(&b.transpose(), a);
    prog.add_eq_zero("stationarity", &f2);
    prog.add_psd_shifted("P", &p, 1.0)?;
    prog.add_nonneg("rho", &(rho - AffMat::scalar(1.0)));
    prog.minimize(&AffMat::scalar(0.0));
    Ok(prog.solve(&opts.solver).status)
}

pub fn unrepresentable_gain_witness(opts: &IrlOptions) -> Result<WitnessCertificate> {
    let sys = witness_system();
    let k = witness_gain();
    let f = &sys.a + &sys.b * &k;
    let eig = f.complex_eigenvalues();
    let mut closed_loop_eigenvalues: Vec<f64> = eig.iter().map(|c| c.re).collect();
    closed_loop_eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let stationarity = [0.1, 1.0, 10.0]
        .into_iter()
        .map(|rv| {
            let status = stationarity_status(&sys, &k, &DMatrix::from_element(1, 1, rv), opts)?;
            Ok(StationarityCheck { r: rv, status })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = DMatrix::identity(1, 1);
    let (cost, _) = generalized_cost_for_gain(&sys, &k, &r, &DMatrix::identity(2, 2))?;
    let (_, gain) = solve_dare(&sys, &cost)?;
    Ok(WitnessCertificate {
        spectral_radius: spectral_radius(&f)?,
        generalized_gain_error: (&gain.k - &k).norm(),
        system: sys,
        gain: k,
        closed_loop_eigenvalues,
        stationarity,
        generalized_cost: cost,
    })
}

/// Values of the kernel data equations `x(k+1)'P x(k+1) - z'Hz` for every column.
pub fn kernel_data_residual(data: &TrajectoryBatch, p: &DMatrix<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let z = data.stacked();
    DVector::from_fn(data.n_d(), |j, _| {
        let xp = data.x_k1.column(j);
        let zj = z.column(j);
        (xp.transpose() * p * xp)[(0, 0)] - (zj.transpose() * h * zj)[(0, 0)]
    })
}
