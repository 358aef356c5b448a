//! Robust cost design over a population of perturbed plants `(M1 + M2 D_j, M2)`.
//!
//! The cost block `[[Q, N'], [N, R]]` is parameterized by factors so that it stays PSD
//! without projection; each forward solve is the trace-maximization LMI for the generalized
//! DARE of one sampled plant.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conic::{AffMat, ConicProgram, SolverSettings, Status, VarShape};
use crate::error::{Error, Result};
use crate::linsys::{is_stable, solve_stein, symmetrize, CostWeights, LinearSystem};

/// Shift used for the strict inequalities of the forward LMI.
pub const FORWARD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPopulation {
    pub sigma: f64,
    pub m: usize,
    pub n: usize,
    pub rng_seed: u64,
}

impl PerturbationPopulation {
    pub fn new(sigma: f64, m: usize, n: usize, rng_seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
        }
        Ok(Self { sigma, m, n, rng_seed })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        if self.sigma == 0.0 {
            return DMatrix::zeros(self.m, self.n);
        }
        let dist = Normal::new(0.0, self.sigma).expect("valid normal");
        DMatrix::from_fn(self.m, self.n, |_, _| dist.sample(rng))
    }

    /// Generator for iteration `t`, split from the master seed.
    pub fn rng_for(&self, t: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(t);
        rng
    }
}

/// `Q = L_Q L_Q' + L_N L_N'`, `N = C L_N'` with `R = C C'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub l_q: DMatrix<f64>,
    pub l_n: DMatrix<f64>,
    pub c_factor: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(l_q: DMatrix<f64>, l_n: DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let n = l_q.nrows();
        if l_q.ncols() != n || l_n.nrows() != n || l_n.ncols() != r.nrows() || !r.is_square() {
            return Err(Error::shape("factor shapes must be L_Q n x n, L_N n x m, R m x m"));
        }
        let c = r.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("R".into()))?.l();
        Ok(Self { l_q, l_n, c_factor: c })
    }

    /// `L_Q = I`, `L_N = 0`, i.e. `Q = I`, `N = 0`.
    pub fn initial(n: usize, r: &DMatrix<f64>) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), DMatrix::zeros(n, r.nrows()), r)
    }

    pub fn n(&self) -> usize {
        self.l_q.nrows()
    }

    pub fn m(&self) -> usize {
        self.c_factor.nrows()
    }

    pub fn q(&self) -> DMatrix<f64> {
        symmetrize(&(&self.l_q * self.l_q.transpose() + &self.l_n * self.l_n.transpose()))
    }

    pub fn n_cross(&self) -> DMatrix<f64> {
        &self.c_factor * self.l_n.transpose()
    }

    pub fn r(&self) -> DMatrix<f64> {
        &self.c_factor * self.c_factor.transpose()
    }

    pub fn cost(&self) -> Result<CostWeights> {
        CostWeights::new(self.q(), self.r(), self.n_cross())
    }

    /// Smallest eigenvalue of `[[Q, N'], [N, R]]`.
    pub fn block_min_eig(&self) -> f64 {
        let (n, m) = (self.n(), self.m());
        let mut blk = DMatrix::zeros(n + m, n + m);
        blk.view_mut((0, 0), (n, n)).copy_from(&self.q());
        let nc = self.n_cross();
        blk.view_mut((n, 0), (m, n)).copy_from(&nc);
        blk.view_mut((0, n), (n, m)).copy_from(&nc.transpose());
        blk.view_mut((n, n), (m, m)).copy_from(&self.r());
        symmetrize(&blk).symmetric_eigenvalues().min()
    }

    /// `(vec L_Q, vec L_N)`, column-major.
    pub fn flat(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.l_q.as_slice().to_vec();
        v.extend_from_slice(self.l_n.as_slice());
        DVector::from_vec(v)
    }

    pub fn with_flat(&self, theta: &DVector<f64>) -> Self {
        let (n, m) = (self.n(), self.m());
        Self {
            l_q: DMatrix::from_column_slice(n, n, &theta.as_slice()[..n * n]),
            l_n: DMatrix::from_column_slice(n, m, &theta.as_slice()[n * n..n * n + n * m]),
            c_factor: self.c_factor.clone(),
        }
    }

    fn entry_name(&self, idx: usize) -> String {
        let n = self.n();
        if idx < n * n {
            format!("L_Q[{},{}]", idx % n, idx / n)
        } else {
            let j = idx - n * n;
            format!("L_N[{},{}]", j % n, j / n)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// `M_j + M2 K_j`
    pub f: DMatrix<f64>,
    pub iterations: usize,
}

/// Maximizes `tr P` subject to `P >= eps I` and
/// `[[Mj'PMj + Q - P, Mj'PM2 + N'], [M2'PMj + N, M2'PM2 + R]] >= eps I` with `Mj = M1 + M2 D`.
///
/// Fails with [`Error::Solver`] when the LMI is infeasible or the returned gain does not
/// stabilize the sampled plant.
pub fn forward_robust_sdp(
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    d: &DMatrix<f64>,
    cost: &CostWeights,
    settings: &SolverSettings,
) -> Result<ForwardSolution> {
    let n = m1.nrows();
    let m = m2.ncols();
    if m1.ncols() != n || m2.nrows() != n || d.shape() != (m, n) {
        return Err(Error::shape("forward SDP expects M1 n x n, M2 n x m, D m x n"));
    }
    let mj = m1 + m2 * d;
    let mut prog = ConicProgram::new();
    let pid = prog.add_var("P", VarShape::Symmetric(n));
    let p = prog.expr(pid);
    let tl = p.sandwich(&mj.transpose(), &mj) - &p + AffMat::constant(&cost.q);
    let tr = p.sandwich(&mj.transpose(), m2) + AffMat::constant(&cost.n_cross.transpose());
    let br = p.sandwich(&m2.transpose(), m2) + AffMat::constant(&cost.r);
    let lmi = AffMat::block(&[vec![Some(tl), Some(tr.clone())], vec![Some(tr.t()), Some(br)]]);
    prog.add_psd_shifted("P", &p, FORWARD_EPS)?;
    prog.add_psd_shifted("riccati", &lmi, FORWARD_EPS)?;
    prog.maximize(&p.trace());
    let sol = prog.solve(settings);
    if sol.status != Status::Optimal {
        return Err(Error::Solver(format!("forward SDP {}", sol.status)));
    }
    let p = sol.value("P").clone();
    let s = &cost.r + m2.transpose() * &p * m2;
    let rhs = m2.transpose() * &p * &mj + &cost.n_cross;
    let k = -s.lu().solve(&rhs).ok_or_else(|| Error::Solver("R + M2'PM2 singular".into()))?;
    let f = &mj + m2 * &k;
    if !is_stable(&f)? {
        return Err(Error::Solver("forward gain does not stabilize the sampled plant".into()));
    }
    Ok(ForwardSolution { p, k, f, iterations: sol.iterations })
}

/// Nominal model, expert closed loop and solver settings shared by every forward solve.
#[derive(Clone, Debug)]
pub struct RobustProblem {
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub f_expert: DMatrix<f64>,
    pub settings: SolverSettings,
}

impl RobustProblem {
    pub fn model(&self) -> Result<LinearSystem> {
        LinearSystem::new(self.m1.clone(), self.m2.clone())
    }

    pub fn forward(&self, d: &DMatrix<f64>, cost: &CostWeights) -> Result<ForwardSolution> {
        forward_robust_sdp(&self.m1, &self.m2, d, cost, &self.settings)
    }

    fn sample_loss(&self, d: &DMatrix<f64>, cost: &CostWeights) -> Result<f64> {
        let sol = self.forward(d, cost)?;
        Ok((sol.f - &self.f_expert).norm_squared())
    }
}

/// `(1/N_b) sum_j ||F_j(Q, N) - F_e||_F^2`.
pub fn batch_loss(problem: &RobustProblem, factors: &FactorPair, samples: &[DMatrix<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty perturbation batch"));
    }
    let cost = factors.cost()?;
    let mut total = 0.0;
    for d in samples {
        total += problem.sample_loss(d, &cost)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    FiniteDifference,
    Implicit,
}

/// Gradient of [`batch_loss`] with respect to `(vec L_Q, vec L_N)`.
pub fn gradient(problem: &RobustProblem, factors: &FactorPair, samples: &[DMatrix<f64>], mode: GradientMode) -> Result<DVector<f64>> {
    match mode {
        GradientMode::FiniteDifference => fd_gradient(problem, factors, samples),
        GradientMode::Implicit => implicit_gradient(problem, factors, samples),
    }
}

fn fd_gradient(problem: &RobustProblem, factors: &FactorPair, samples: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    let theta = factors.flat();
    let mut g = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[i].abs());
        let probe = |sign: f64| -> Result<f64> {
            let mut t = theta.clone();
            t[i] += sign * h;
            let loss = batch_loss(problem, &factors.with_flat(&t), samples).map_err(|_| Error::GradientProbe { entry: factors.entry_name(i) })?;
            if loss.is_finite() {
                Ok(loss)
            } else {
                Err(Error::GradientProbe { entry: factors.entry_name(i) })
            }
        };
        let up = probe(1.0)?;
        let down = probe(-1.0)?;
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Differentiates the optimality conditions of each forward solve (the generalized DARE at
/// its stabilizing solution) by one adjoint Stein equation per sample.
fn implicit_gradient(problem: &RobustProblem, factors: &FactorPair, samples: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("empty perturbation batch"));
    }
    let cost = factors.cost()?;
    let (n, m) = (factors.n(), factors.m());
    let b = &problem.m2;
    let mut g_q = DMatrix::zeros(n, n);
    let mut g_n = DMatrix::zeros(m, n);
    for d in samples {
        let sol = problem.forward(d, &cost)?;
        let e = &sol.f - &problem.f_expert;
        let s = &cost.r + b.transpose() * &sol.p * b;
        let g = s.lu().solve(&(b.transpose() * &e)).ok_or_else(|| Error::Solver("R + M2'PM2 singular".into()))?;
        let w = symmetrize(&(b * &g * sol.f.transpose()));
        let lam = symmetrize(&solve_stein(&sol.f, &w)?);
        g_q -= &lam * 2.0;
        g_n -= (&g + &sol.k * &lam * 2.0) * 2.0;
    }
    let scale = 1.0 / samples.len() as f64;
    g_q *= scale;
    g_n *= scale;
    let d_lq = &g_q * &factors.l_q * 2.0;
    let d_ln = &g_q * &factors.l_n * 2.0 + g_n.transpose() * &factors.c_factor;
    let mut v: Vec<f64> = d_lq.as_slice().to_vec();
    v.extend_from_slice(d_ln.as_slice());
    Ok(DVector::from_vec(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_t = eta0 / (1 + t / tau)`
    Decaying { eta0: f64, tau: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Decaying { eta0, tau } => eta0 / (1.0 + t as f64 / tau),
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Decaying { eta0: 0.05, tau: 500.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    pub mode: GradientMode,
    /// Total draws allowed per batch, as a multiple of the batch size.
    pub resample_factor: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 64,
            schedule: StepSchedule::default(),
            mode: GradientMode::FiniteDifference,
            resample_factor: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub norm_q: f64,
    pub norm_n: f64,
    pub step: f64,
    pub rejections: usize,
    /// Smallest eigenvalue of the cost block at this iterate.
    pub block_min_eig: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub factors: FactorPair,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    pub rng_seed: u64,
}

impl TrainingState {
    pub fn new(factors: FactorPair, rng_seed: u64) -> Self {
        Self { factors, iteration: 0, history: Vec::new(), rng_seed }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.loss).collect()
    }

    /// CSV with header `iter,loss,normQ,normN,step,rejections`.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "loss", "normQ", "normN", "step", "rejections"])?;
        for h in &self.history {
            w.write_record([
                h.iter.to_string(),
                format!("{:e}", h.loss),
                format!("{:e}", h.norm_q),
                format!("{:e}", h.norm_n),
                format!("{:e}", h.step),
                h.rejections.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws a batch of stabilizable perturbations at the given cost, rejecting failed forward solves.
pub fn draw_batch<R: Rng>(
    problem: &RobustProblem,
    population: &PerturbationPopulation,
    cost: &CostWeights,
    batch_size: usize,
    resample_factor: usize,
    rng: &mut R,
) -> Result<(Vec<DMatrix<f64>>, usize)> {
    let budget = resample_factor.max(1) * batch_size;
    let mut accepted = Vec::with_capacity(batch_size);
    let mut rejected = 0;
    let mut drawn = 0;
    while accepted.len() < batch_size {
        if drawn >= budget {
            return Err(Error::ResampleBudget { rejected, drawn });
        }
        let d = population.sample(rng);
        drawn += 1;
        match problem.forward(&d, cost) {
            Ok(_) => accepted.push(d),
            Err(_) => rejected += 1,
        }
        if drawn >= batch_size && 2 * rejected > drawn {
            return Err(Error::PopulationTooWild { rejected, drawn });
        }
    }
    Ok((accepted, rejected))
}

/// Runs `config.iterations` SGD steps from `state`, appending to its history.
///
/// On error the state keeps every completed iteration, so callers can flush a partial history.
pub fn train(
    problem: &RobustProblem,
    population: &PerturbationPopulation,
    config: &TrainingConfig,
    state: &mut TrainingState,
) -> Result<()> {
    for _ in 0..config.iterations {
        let t = state.iteration;
        let mut rng = population.rng_for(t as u64);
        let cost = state.factors.cost()?;
        let (samples, rejections) = draw_batch(problem, population, &cost, config.batch_size, config.resample_factor, &mut rng)?;
        let loss = batch_loss(problem, &state.factors, &samples)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {t}")));
        }
        let grad = gradient(problem, &state.factors, &samples, config.mode)?;
        let step = config.schedule.at(t);
        state.history.push(HistoryRow {
            iter: t,
            loss,
            norm_q: state.factors.q().norm(),
            norm_n: state.factors.n_cross().norm(),
            step,
            rejections,
            block_min_eig: state.factors.block_min_eig(),
        });
        let theta = state.factors.flat() - grad * step;
        state.factors = state.factors.with_flat(&theta);
        state.iteration += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub sigma: f64,
    pub k: usize,
    pub state_index: usize,
    pub mean: f64,
    pub variance: f64,
    pub controller_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub sigma: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// Per controller tag, per state: variance averaged over the horizon.
    pub mean_variance: Vec<(String, Vec<f64>)>,
    /// Per controller tag: `sqrt(sum_k ||mean_k||^2)`.
    pub mean_deviation_norm: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct EvaluationSettings {
    pub monte_carlo: usize,
    pub horizon: usize,
    pub x0: DVector<f64>,
    pub seed: u64,
}

/// Monte Carlo trajectory envelopes of each tagged cost over plants `(M1 + M2 D, M2)`.
///
/// A draw is rejected for all controllers if any of them fails to produce a stabilizing gain,
/// so the envelopes are computed over the same plants.
pub fn evaluate_robustness(
    problem: &RobustProblem,
    costs: &[(String, CostWeights)],
    sigma: f64,
    eval: &EvaluationSettings,
) -> Result<(Vec<EnvelopeRow>, RobustnessSummary)> {
    let n = problem.m1.nrows();
    let m = problem.m2.ncols();
    let population = PerturbationPopulation::new(sigma, m, n, eval.seed)?;
    let mut rng = population.rng_for(0);
    // trajectories[c][draw][k]
    let mut trajectories: Vec<Vec<Vec<DVector<f64>>>> = vec![Vec::new(); costs.len()];
    let mut rejected = 0;
    let mut drawn = 0;
    while trajectories[0].len() < eval.monte_carlo {
        if drawn >= 3 * eval.monte_carlo.max(1) {
            return Err(Error::ResampleBudget { rejected, drawn });
        }
        let d = population.sample(&mut rng);
        drawn += 1;
        let sols: Result<Vec<_>> = costs.iter().map(|(_, c)| problem.forward(&d, c)).collect();
        let Ok(sols) = sols else {
            rejected += 1;
            continue;
        };
        for (ci, sol) in sols.iter().enumerate() {
            let mut xs = Vec::with_capacity(eval.horizon + 1);
            let mut x = eval.x0.clone();
            xs.push(x.clone());
            for _ in 0..eval.horizon {
                x = &sol.f * x;
                xs.push(x.clone());
            }
            trajectories[ci].push(xs);
        }
    }
    let mut rows = Vec::new();
    let mut mean_variance = Vec::new();
    let mut mean_deviation_norm = Vec::new();
    let count = eval.monte_carlo as f64;
    for (ci, (tag, _)) in costs.iter().enumerate() {
        let mut var_sum = vec![0.0; n];
        let mut dev = 0.0;
        for k in 0..=eval.horizon {
            for i in 0..n {
                let vals: Vec<f64> = trajectories[ci].iter().map(|t| t[k][i]).collect();
                let mean = vals.iter().sum::<f64>() / count;
                let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
                var_sum[i] += variance;
                dev += mean * mean;
                rows.push(EnvelopeRow { sigma, k, state_index: i + 1, mean, variance, controller_tag: tag.clone() });
            }
        }
        let steps = (eval.horizon + 1) as f64;
        mean_variance.push((tag.clone(), var_sum.into_iter().map(|v| v / steps).collect()));
        mean_deviation_norm.push((tag.clone(), dev.sqrt()));
    }
    let summary = RobustnessSummary { sigma, accepted: eval.monte_carlo, rejected, mean_variance, mean_deviation_norm };
    Ok((rows, summary))
}

/// CSV with header `sigma,k,state_index,mean,variance,controller_tag`.
pub fn write_envelopes_csv<W: Write>(out: W, rows: &[EnvelopeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma", "k", "state_index", "mean", "variance", "controller_tag"])?;
    for r in rows {
        w.write_record([
            r.sigma.to_string(),
            r.k.to_string(),
            r.state_index.to_string(),
            format!("{:e}", r.mean),
            format!("{:e}", r.variance),
            r.controller_tag.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
