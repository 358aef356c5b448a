//! Experiment drivers: configuration, per-command runs and their reports.
//!
//! Every command returns a serializable report; [`RunDir`] writes it next to the resolved
//! configuration so a run can be reproduced from its output directory alone.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conic::{SolverSettings, Status};
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_expert, excitation_check, excited_data, expert_data, regress_model, target_gain_uncertain, ExcitationReport,
    RegressedModel, TrajectoryBatch,
};
use crate::io::{write_matrix, write_trajectory_file, MatrixText};
use crate::irl::{
    generalized_cost_for_gain, irl_feasibility, irl_merged, irl_model_free, irl_relaxed, irl_single_variable, irl_uncertain,
    kernel_data_residual, perturbed_gain, unrepresentable_gain_witness, IrlOptions, IrlResult, KernelMatrix, Method,
};
use crate::linsys::{
    asymmetry, closed_loop, dare_residual, is_stable, power_system, simulate, solve_dare, CostWeights, FeedbackGain,
    LinearSystem, Policy, Trajectory,
};
use crate::robust::{
    evaluate_robustness, forward_robust_sdp, write_envelopes_csv, EvaluationSettings, FactorPair, GradientMode,
    PerturbationPopulation, RobustProblem, RobustnessSummary, StepSchedule, TrainingConfig, TrainingState,
};

// RNG streams split from the master seed, one per consumer.
const STREAM_DIRECTIONS: u64 = 1;
const STREAM_EXCITATION: u64 = 2;
const STREAM_EXPERT: u64 = 3;
const STREAM_UNCERTAIN: u64 = 4;
const STREAM_RANDOM_SYSTEMS: u64 = 5;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemSource {
    PowerSystem,
    /// Matrices in the JSON matrix format.
    Files { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    /// Perturbation directions drawn per nonzero delta.
    pub directions: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { deltas: vec![0.0, 0.1, 0.5, 2.5], directions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Columns of open-loop excitation data for the model-free program.
    pub n_d: usize,
    pub amplitude: f64,
    pub expert_trajectories: usize,
    pub expert_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_d: 20, amplitude: 1.0, expert_trajectories: 10, expert_steps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbedConfig {
    pub d: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub n_d: usize,
    pub steps: usize,
}

impl Default for PerturbedConfig {
    fn default() -> Self {
        Self { d: vec![1.105, -1.702, -2.888], gamma1: 2.0, gamma2: 2.0, n_d: 40, steps: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub sigma: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub schedule: StepSchedule,
    pub mode: GradientMode,
    pub resample_factor: usize,
    pub eval_sigmas: Vec<f64>,
    pub monte_carlo: usize,
    pub horizon: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            sigma: 1.0,
            batch_size: t.batch_size,
            iterations: t.iterations,
            schedule: t.schedule,
            mode: t.mode,
            resample_factor: t.resample_factor,
            eval_sigmas: vec![1.0, 2.5, 5.5],
            monte_carlo: 500,
            horizon: 50,
        }
    }
}

impl RobustConfig {
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            schedule: self.schedule.clone(),
            mode: self.mode,
            resample_factor: self.resample_factor,
        }
    }

    /// Batch 526 and 7000 iterations: many hours of forward solves.
    pub fn full_scale(&mut self) {
        self.batch_size = 526;
        self.iterations = 7000;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Fault injection: the uncertain plant is built with `-B`.
    pub corrupt_b_sign: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Trajectory batch CSV (`xk_*`, `uk_*`, `xk1_*`); generated from the system when absent.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub eps: f64,
    pub solver: SolverSettings,
    pub system: SystemSource,
    /// Input weight `R = r I`.
    pub r: f64,
    pub x0: Vec<f64>,
    pub methods: Vec<Method>,
    pub sweep: SweepConfig,
    pub data: DataConfig,
    pub perturbed: PerturbedConfig,
    pub robust: RobustConfig,
    pub verify: VerifyConfig,
    pub identify: IdentifyConfig,
    pub simulate_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            eps: 1e-8,
            solver: SolverSettings::default(),
            system: SystemSource::PowerSystem,
            r: 1.0,
            x0: vec![1.0, 1.0, 1.0],
            methods: vec![Method::Feasibility, Method::Relaxed, Method::Merged, Method::ModelFree],
            sweep: SweepConfig::default(),
            data: DataConfig::default(),
            perturbed: PerturbedConfig::default(),
            robust: RobustConfig::default(),
            verify: VerifyConfig::default(),
            identify: IdentifyConfig::default(),
            simulate_steps: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn irl_options(&self) -> IrlOptions {
        IrlOptions { eps: self.eps, solver: self.solver, ..IrlOptions::default() }
    }

    pub fn system(&self) -> Result<LinearSystem> {
        match &self.system {
            SystemSource::PowerSystem => Ok(power_system::system()),
            SystemSource::Files { a, b } => LinearSystem::new(crate::io::read_matrix(a)?, crate::io::read_matrix(b)?),
        }
    }

    pub fn r_matrix(&self, m: usize) -> DMatrix<f64> {
        DMatrix::identity(m, m) * self.r
    }

    /// `Q = I`, `R = r I`.
    pub fn expert_cost(&self, sys: &LinearSystem) -> Result<CostWeights> {
        CostWeights::standard(DMatrix::identity(sys.n(), sys.n()), self.r_matrix(sys.m()))
    }

    pub fn x0(&self, n: usize) -> Result<DVector<f64>> {
        if self.x0.len() != n {
            return Err(Error::shape(format!("x0 has {} entries, system has {n} states", self.x0.len())));
        }
        Ok(DVector::from_column_slice(&self.x0))
    }
}

/// Output directory of one command: `config.resolved`, `report.json` and artifacts.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let path = cfg.out.join(command);
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("config.resolved"), cfg.to_toml()?)?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(report)?;
        std::fs::write(self.file("report.json"), text + "\n")?;
        Ok(())
    }
}

/// Expert reference: DARE gain and closed loop of the configured system under `Q = I`, `R = r I`.
#[derive(Clone, Debug)]
pub struct Reference {
    pub system: LinearSystem,
    pub cost: CostWeights,
    pub gain: DMatrix<f64>,
    pub closed_loop: DMatrix<f64>,
}

impl Reference {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let system = cfg.system()?;
        let cost = cfg.expert_cost(&system)?;
        let (_, gain) = solve_dare(&system, &cost)?;
        let closed_loop = closed_loop(&system, &gain)?;
        Ok(Self { system, cost, gain: gain.k, closed_loop })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method_tag: String,
    pub status: Status,
    /// Infeasible, or optimal with a constraint violation above tolerance.
    pub inf: bool,
    pub delta: Option<f64>,
    pub direction: Option<usize>,
    pub gain_error: f64,
    pub closed_loop_error: f64,
    pub residual_gain_match: f64,
    pub q_psd: bool,
    pub wall_clock_s: f64,
    pub p_star: MatrixText,
    pub q_star: MatrixText,
    pub n_star: MatrixText,
    pub k_star: MatrixText,
}

impl RunReport {
    pub fn from_result(res: &IrlResult, k_ref: &DMatrix<f64>, closed_loop_error: f64) -> Self {
        let status = if res.is_inf() { Status::Infeasible } else { res.status };
        let finite = status == Status::Optimal;
        Self {
            method_tag: res.method.tag().to_string(),
            status,
            inf: res.is_inf(),
            delta: None,
            direction: None,
            gain_error: if finite { res.gain_error(k_ref) } else { f64::NAN },
            closed_loop_error: if finite { closed_loop_error } else { f64::NAN },
            residual_gain_match: res.residual_gain_match,
            q_psd: res.q_psd,
            wall_clock_s: res.wall_clock_s,
            p_star: (&res.p_star).into(),
            q_star: (&res.q_star).into(),
            n_star: (&res.n_star).into(),
            k_star: (&res.k_star).into(),
        }
    }

    pub fn is_numerical_failure(&self) -> bool {
        self.status == Status::NumericalFailure
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub eps: f64,
    pub solver: SolverSettings,
    pub reference_gain: MatrixText,
    pub excitation: ExcitationReport,
    pub cells: Vec<RunReport>,
}

impl SweepReport {
    pub fn numerical_failures(&self) -> usize {
        self.cells.iter().filter(|c| c.is_numerical_failure()).count()
    }

    pub fn cell(&self, delta: f64, direction: usize, method: Method) -> Option<&RunReport> {
        self.cells
            .iter()
            .find(|c| c.delta == Some(delta) && c.direction == Some(direction) && c.method_tag == method.tag())
    }

    /// `delta,direction,method,status,gain_error,closed_loop_error,wall_clock_s`
    pub fn write_table<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delta", "direction", "method", "status", "gain_error", "closed_loop_error", "wall_clock_s"])?;
        for c in &self.cells {
            w.write_record([
                c.delta.map(|d| d.to_string()).unwrap_or_default(),
                c.direction.map(|d| d.to_string()).unwrap_or_default(),
                c.method_tag.clone(),
                c.status.to_string(),
                format!("{:e}", c.gain_error),
                format!("{:e}", c.closed_loop_error),
                format!("{:.6}", c.wall_clock_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unit-norm perturbation direction number `index` for gains of shape `m x n`.
pub fn perturbation_direction(seed: u64, index: usize, m: usize, n: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, STREAM_DIRECTIONS);
    let mut e = DMatrix::zeros(m, n);
    for _ in 0..=index {
        e = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    }
    let norm = e.norm();
    e / norm
}

/// Open-loop excitation data for the model-free program.
pub fn excitation_batch(cfg: &ExperimentConfig, sys: &LinearSystem) -> Result<TrajectoryBatch> {
    let mut rng = stream_rng(cfg.seed, STREAM_EXCITATION);
    excited_data(sys, &cfg.x0(sys.n())?, cfg.data.n_d, cfg.data.amplitude, &mut rng)
}

pub fn run_method(
    method: Method,
    reference: &Reference,
    r: &DMatrix<f64>,
    k_hat: &DMatrix<f64>,
    data: &TrajectoryBatch,
    opts: &IrlOptions,
) -> Result<IrlResult> {
    let sys = &reference.system;
    let f_hat = &reference.closed_loop;
    match method {
        Method::Feasibility => irl_feasibility(sys, r, k_hat, f_hat, opts),
        Method::Relaxed => irl_relaxed(sys, r, k_hat, f_hat, opts),
        Method::Merged => irl_merged(sys, r, k_hat, f_hat, opts),
        Method::SingleVariable => irl_single_variable(sys, r, k_hat, opts),
        Method::ModelFree => irl_model_free(data, r, k_hat, opts),
        Method::Generalized => {
            let model = RegressedModel { m1: sys.a.clone(), m2: sys.b.clone() };
            irl_uncertain(&model, r, k_hat, opts)
        }
    }
}

/// Every `(delta, direction, method)` cell; per-cell solver failures are recorded, never raised.
pub fn cmd_nominal_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let reference = Reference::new(cfg)?;
    let sys = &reference.system;
    let (n, m) = (sys.n(), sys.m());
    let r = cfg.r_matrix(m);
    let opts = cfg.irl_options();
    let data = excitation_batch(cfg, sys)?;
    let mut cells = Vec::new();
    for &delta in &cfg.sweep.deltas {
        let directions = if delta == 0.0 { 1 } else { cfg.sweep.directions };
        for dir in 0..directions {
            let e = perturbation_direction(cfg.seed, dir, m, n);
            let k_hat = perturbed_gain(&reference.gain, delta, &e)?;
            for &method in &cfg.methods {
                let res = run_method(method, &reference, &r, &k_hat, &data, &opts)?;
                let cl_err = (&sys.a + &sys.b * &res.k_star - &reference.closed_loop).norm();
                let mut report = RunReport::from_result(&res, &reference.gain, cl_err);
                report.delta = Some(delta);
                report.direction = Some(dir);
                cells.push(report);
            }
        }
    }
    Ok(SweepReport {
        eps: cfg.eps,
        solver: cfg.solver,
        reference_gain: (&reference.gain).into(),
        excitation: excitation_check(&data),
        cells,
    })
}

/// Uncertain plant `(A + gamma1 B D, gamma2 B)`.
pub fn uncertain_plant(sys: &LinearSystem, d: &DMatrix<f64>, gamma1: f64, gamma2: f64) -> Result<LinearSystem> {
    LinearSystem::new(&sys.a + &sys.b * d * gamma1, &sys.b * gamma2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbedReport {
    pub run: RunReport,
    pub eps: f64,
    pub solver: SolverSettings,
    pub m1: MatrixText,
    pub m2: MatrixText,
    pub f_expert: MatrixText,
    pub k_expert: MatrixText,
    pub target_gain: MatrixText,
    pub target_unique: bool,
    /// `||K* - K_tar||_F`
    pub gain_residual: f64,
    /// `||M1 + M2 K* - F_e||_F`
    pub closed_loop_residual: f64,
    /// Largest per-state gap between the expert and imitation trajectories.
    pub max_trajectory_deviation: f64,
}

pub struct PerturbedOutcome {
    pub report: PerturbedReport,
    pub expert_trajectory: Trajectory,
    pub local_trajectory: Trajectory,
}

/// Identification of the uncertain plant, target gain and generalized IRL, end to end.
pub fn cmd_perturbed(cfg: &ExperimentConfig) -> Result<PerturbedOutcome> {
    let reference = Reference::new(cfg)?;
    let sys = &reference.system;
    let (n, m) = (sys.n(), sys.m());
    if cfg.perturbed.d.len() != m * n {
        return Err(Error::shape(format!("perturbation D needs {} entries", m * n)));
    }
    let d = DMatrix::from_row_slice(m, n, &cfg.perturbed.d);
    let mut rng = stream_rng(cfg.seed, STREAM_EXPERT);
    let expert = expert_data(sys, &FeedbackGain::new(reference.gain.clone()), cfg.data.expert_trajectories, cfg.data.expert_steps, &mut rng)?;
    let (f_e, k_e) = estimate_expert(&expert)?;
    let plant = uncertain_plant(sys, &d, cfg.perturbed.gamma1, cfg.perturbed.gamma2)?;
    let mut rng = stream_rng(cfg.seed, STREAM_UNCERTAIN);
    let data = excited_data(&plant, &cfg.x0(n)?, cfg.perturbed.n_d, cfg.data.amplitude, &mut rng)?;
    let model = regress_model(&data)?;
    let target = target_gain_uncertain(&model, &f_e)?;
    let r = cfg.r_matrix(m);
    let res = irl_uncertain(&model, &r, &target.gain.k, &cfg.irl_options())?;
    let closed_loop_residual = (&model.m1 + &model.m2 * &res.k_star - &f_e).norm();
    let gain_residual = (&res.k_star - &target.gain.k).norm();
    let mut run = RunReport::from_result(&res, &target.gain.k, closed_loop_residual);
    run.gain_error = gain_residual;

    let x0 = cfg.x0(n)?;
    let steps = cfg.perturbed.steps;
    let expert_trajectory = simulate(sys, Policy::Gain(&FeedbackGain::new(reference.gain.clone())), &x0, steps)?;
    let (local_trajectory, max_trajectory_deviation) = if res.status == Status::Optimal {
        let local = simulate(&plant, Policy::Gain(&res.gain()), &x0, steps)?;
        let dev = expert_trajectory
            .states
            .iter()
            .zip(&local.states)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        (local, dev)
    } else {
        (Trajectory { states: vec![x0.clone()], inputs: Vec::new() }, f64::NAN)
    };
    let report = PerturbedReport {
        run,
        eps: cfg.eps,
        solver: cfg.solver,
        m1: (&model.m1).into(),
        m2: (&model.m2).into(),
        f_expert: (&f_e).into(),
        k_expert: (&k_e).into(),
        target_gain: (&target.gain.k).into(),
        target_unique: target.unique,
        gain_residual,
        closed_loop_residual,
        max_trajectory_deviation,
    };
    Ok(PerturbedOutcome { report, expert_trajectory, local_trajectory })
}

/// Nominal model and expert closed loop identified from data, as used by robust training.
pub fn robust_problem(cfg: &ExperimentConfig) -> Result<RobustProblem> {
    let reference = Reference::new(cfg)?;
    let sys = &reference.system;
    let mut rng = stream_rng(cfg.seed, STREAM_EXPERT);
    let expert = expert_data(sys, &FeedbackGain::new(reference.gain.clone()), cfg.data.expert_trajectories, cfg.data.expert_steps, &mut rng)?;
    let (f_e, _) = estimate_expert(&expert)?;
    let mut rng = stream_rng(cfg.seed, STREAM_UNCERTAIN);
    let data = excited_data(sys, &cfg.x0(sys.n())?, cfg.perturbed.n_d, cfg.data.amplitude, &mut rng)?;
    let model = regress_model(&data)?;
    Ok(RobustProblem { m1: model.m1, m2: model.m2, f_expert: f_e, settings: cfg.solver })
}

pub fn training_population(cfg: &ExperimentConfig, problem: &RobustProblem) -> Result<PerturbationPopulation> {
    PerturbationPopulation::new(cfg.robust.sigma, problem.m2.ncols(), problem.m1.nrows(), cfg.seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean of the first and last `window` losses.
    pub window: usize,
    pub head_mean: f64,
    pub tail_mean: f64,
    /// Relative change of `||Q||_F` and `||N||_F` over the final 10% of iterations.
    pub drift_q: f64,
    pub drift_n: f64,
    pub min_block_eig: f64,
    pub total_rejections: usize,
    pub aborted: Option<String>,
}

fn relative_drift(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = values.last().copied().unwrap_or(0.0);
    (hi - lo) / last.abs().max(1e-12)
}

pub fn summarize_training(state: &TrainingState, aborted: Option<String>) -> TrainingSummary {
    let losses = state.losses();
    let t = losses.len();
    let window = 100.min(t.max(1));
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    let tail_start = t - (t / 10).max(1).min(t);
    let nq: Vec<f64> = state.history[tail_start..].iter().map(|h| h.norm_q).collect();
    let nn: Vec<f64> = state.history[tail_start..].iter().map(|h| h.norm_n).collect();
    TrainingSummary {
        iterations: t,
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        window,
        head_mean: mean(&losses[..window.min(t)]),
        tail_mean: mean(&losses[t.saturating_sub(window)..]),
        drift_q: relative_drift(&nq),
        drift_n: relative_drift(&nn),
        min_block_eig: state.history.iter().map(|h| h.block_min_eig).fold(f64::INFINITY, f64::min),
        total_rejections: state.history.iter().map(|h| h.rejections).sum(),
        aborted,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustReport {
    pub eps: f64,
    pub solver: SolverSettings,
    pub training: TrainingSummary,
    pub q_final: MatrixText,
    pub n_final: MatrixText,
    pub evaluations: Vec<RobustnessSummary>,
}

/// Train robust factors, then compare learned and expert costs over each evaluation sigma.
///
/// The history CSV is written even if training aborts.
pub fn cmd_robust(cfg: &ExperimentConfig, run: Option<&RunDir>) -> Result<RobustReport> {
    let problem = robust_problem(cfg)?;
    let population = training_population(cfg, &problem)?;
    let r = cfg.r_matrix(problem.m2.ncols());
    let mut state = TrainingState::new(FactorPair::initial(problem.m1.nrows(), &r)?, cfg.seed);
    let outcome = crate::robust::train(&problem, &population, &cfg.robust.training(), &mut state);
    if let Some(run) = run {
        state.write_history_csv(std::fs::File::create(run.file("history.csv"))?)?;
    }
    outcome?;
    let learned = state.factors.cost()?;
    let expert = cfg.expert_cost(&problem.model()?)?;
    let costs = vec![("learned".to_string(), learned.clone()), ("expert".to_string(), expert)];
    let mut rows = Vec::new();
    let mut evaluations = Vec::new();
    for (i, &sigma) in cfg.robust.eval_sigmas.iter().enumerate() {
        let eval = EvaluationSettings {
            monte_carlo: cfg.robust.monte_carlo,
            horizon: cfg.robust.horizon,
            x0: cfg.x0(problem.m1.nrows())?,
            seed: cfg.seed.wrapping_add(1000 + i as u64),
        };
        let (env, summary) = evaluate_robustness(&problem, &costs, sigma, &eval)?;
        rows.extend(env);
        evaluations.push(summary);
    }
    if let Some(run) = run {
        write_envelopes_csv(std::fs::File::create(run.file("envelopes.csv"))?, &rows)?;
        write_matrix(run.file("q_final.json"), &learned.q)?;
        write_matrix(run.file("n_final.json"), &learned.n_cross)?;
    }
    Ok(RobustReport {
        eps: cfg.eps,
        solver: cfg.solver,
        training: summarize_training(&state, None),
        q_final: (&learned.q).into(),
        n_final: (&learned.n_cross).into(),
        evaluations,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn below(name: &str, residual: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), residual, threshold, pass: residual <= threshold, detail: detail.into() }
    }

    fn flag(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), residual: f64::NAN, threshold: f64::NAN, pass, detail: detail.into() }
    }

    fn failed(name: &str, err: &Error) -> Self {
        Self::flag(name, false, format!("error: {err}"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub eps: f64,
    pub solver: SolverSettings,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Random controllable pair with `n` states and `m` inputs; `A` may be unstable.
pub fn random_controllable_system<R: Rng>(rng: &mut R, n: usize, m: usize) -> LinearSystem {
    loop {
        let scale = 1.0 / (n as f64).sqrt();
        let a = DMatrix::from_fn(n, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sys = LinearSystem::new(a, b).expect("shapes");
        if sys.is_controllable(1e-6) {
            return sys;
        }
    }
}

/// Random cost with a positive definite block `[[Q, N'], [N, R]]`.
pub fn random_cost<R: Rng>(rng: &mut R, n: usize, m: usize, cross: bool) -> CostWeights {
    let g = DMatrix::from_fn(n + m, n + m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut block = &g * g.transpose() / (n + m) as f64 + DMatrix::identity(n + m, n + m) * 0.1;
    if !cross {
        block.view_mut((n, 0), (m, n)).fill(0.0);
        block.view_mut((0, n), (n, m)).fill(0.0);
    }
    CostWeights::new(
        block.view((0, 0), (n, n)).into_owned(),
        block.view((n, n), (m, m)).into_owned(),
        block.view((n, 0), (m, n)).into_owned(),
    )
    .expect("PD block")
}

/// Trace-maximization LMI against fixed-point DARE: worst relative errors on `P` and `K`.
pub fn lmi_dare_agreement(systems: usize, seed: u64, settings: &SolverSettings) -> Result<(f64, f64)> {
    let mut rng = stream_rng(seed, STREAM_RANDOM_SYSTEMS);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..systems {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=2.min(n));
        let sys = random_controllable_system(&mut rng, n, m);
        let cost = random_cost(&mut rng, n, m, true);
        let (p, k) = solve_dare(&sys, &cost)?;
        let fwd = forward_robust_sdp(&sys.a, &sys.b, &DMatrix::zeros(m, n), &cost, settings)?;
        worst.0 = worst.0.max((&fwd.p - &p.p).norm() / p.p.norm());
        worst.1 = worst.1.max((&fwd.k - &k.k).norm() / k.k.norm().max(1e-12));
    }
    Ok(worst)
}

fn run_check(checks: &mut Vec<Check>, name: &str, f: impl FnOnce() -> Result<Check>) {
    checks.push(f().unwrap_or_else(|e| Check::failed(name, &e)));
}

/// Cross-module oracle suite; failures are report lines, never errors.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let opts = cfg.irl_options();
    let mut checks = Vec::new();
    let reference = Reference::new(cfg);
    let reference = match reference {
        Ok(r) => r,
        Err(e) => {
            checks.push(Check::failed("reference-dare", &e));
            return Ok(VerifyReport { eps: cfg.eps, solver: cfg.solver, checks });
        }
    };
    let sys = &reference.system;
    let (n, m) = (sys.n(), sys.m());
    let r = cfg.r_matrix(m);

    run_check(&mut checks, "dare-residual", || {
        let (p, k) = solve_dare(sys, &reference.cost)?;
        let res = dare_residual(sys, &reference.cost, &p.p);
        let stable = is_stable(&closed_loop(sys, &k)?)?;
        let mut c = Check::below("dare-residual", res, 1e-9 * (1.0 + p.p.norm()), format!("stable closed loop: {stable}"));
        c.pass &= stable;
        Ok(c)
    });
    run_check(&mut checks, "value-symmetry", || {
        let (p, _) = solve_dare(sys, &reference.cost)?;
        Ok(Check::below("value-symmetry", asymmetry(&p.p), 1e-12 * (1.0 + p.p.norm()), ""))
    });
    run_check(&mut checks, "simulation-consistency", || {
        let gain = FeedbackGain::new(reference.gain.clone());
        let x0 = cfg.x0(n)?;
        let traj = simulate(sys, Policy::Gain(&gain), &x0, 50)?;
        let mut x = x0.clone();
        let mut worst = 0.0f64;
        for s in &traj.states {
            worst = worst.max((s - &x).norm() / x.norm().max(1e-300));
            x = &reference.closed_loop * x;
        }
        Ok(Check::below("simulation-consistency", worst, 1e-9, "50 steps"))
    });
    run_check(&mut checks, "lmi-dare-agreement", || {
        let (p_err, k_err) = lmi_dare_agreement(10, cfg.seed, &cfg.solver)?;
        Ok(Check::below("lmi-dare-agreement", p_err.max(k_err), 1e-5, format!("P {p_err:.2e}, K {k_err:.2e} over 10 random systems")))
    });
    run_check(&mut checks, "expert-estimator-exactness", || {
        let mut rng = stream_rng(cfg.seed, STREAM_EXPERT);
        let data = expert_data(sys, &FeedbackGain::new(reference.gain.clone()), cfg.data.expert_trajectories, cfg.data.expert_steps, &mut rng)?;
        let (f, k) = estimate_expert(&data)?;
        let err = (&k - &reference.gain).norm().max((&f - &reference.closed_loop).norm());
        Ok(Check::below("expert-estimator-exactness", err, 1e-8, ""))
    });
    run_check(&mut checks, "model-regression-exactness", || {
        let data = excitation_batch(cfg, sys)?;
        let model = regress_model(&data)?;
        let err = (&model.m1 - &sys.a).norm().max((&model.m2 - &sys.b).norm());
        Ok(Check::below("model-regression-exactness", err, 1e-8, ""))
    });
    run_check(&mut checks, "excitation-rank", || {
        let data = excitation_batch(cfg, sys)?;
        let good = excitation_check(&data);
        let constant: Vec<DVector<f64>> = vec![DVector::from_element(m, 1.0); cfg.data.n_d];
        let traj = simulate(sys, Policy::Inputs(&constant), &cfg.x0(n)?, cfg.data.n_d)?;
        let poor = excitation_check(&TrajectoryBatch::from_trajectory(&traj));
        Ok(Check::flag(
            "excitation-rank",
            good.passes && !poor.passes,
            format!("iid rank {}/{}, constant-input rank {}", good.gramian_rank, good.required_rank, poor.gramian_rank),
        ))
    });
    run_check(&mut checks, "kernel-identity", || {
        let data = excitation_batch(cfg, sys)?;
        let res = irl_model_free(&data, &r, &reference.gain, &opts)?;
        let kernel = res.kernel.as_ref().ok_or_else(|| Error::Solver(format!("model-free status {}", res.status)))?;
        let h_model = KernelMatrix::model_based(sys, &res.p_star).assembled();
        let err = (&kernel.assembled() - &h_model).norm() / (1.0 + h_model.norm());
        let data_res = kernel_data_residual(&data, &res.p_star, &kernel.assembled()).amax();
        Ok(Check::below("kernel-identity", err, 1e-6, format!("data equation residual {data_res:.2e}")))
    });
    for (name, method) in [
        ("cost-equivalence-merged", Method::Merged),
        ("cost-equivalence-single-variable", Method::SingleVariable),
        ("cost-equivalence-model-free", Method::ModelFree),
    ] {
        run_check(&mut checks, name, || {
            let data = excitation_batch(cfg, sys)?;
            let res = run_method(method, &reference, &r, &reference.gain, &data, &opts)?;
            if res.status != Status::Optimal {
                return Ok(Check::flag(name, false, format!("status {}", res.status)));
            }
            let cost = CostWeights::new(res.q_star.clone(), r.clone(), DMatrix::zeros(m, n))?;
            let (_, k) = solve_dare(sys, &cost)?;
            Ok(Check::below(name, (&k.k - &reference.gain).norm(), 1e-5, "DARE gain of recovered Q vs expert gain"))
        });
    }
    run_check(&mut checks, "witness-eigenvalues", || {
        let w = unrepresentable_gain_witness(&opts)?;
        let err = w.closed_loop_eigenvalues.iter().map(|e| (e - 0.5).abs()).fold(0.0, f64::max);
        Ok(Check::below("witness-eigenvalues", err, 1e-12, format!("{:?}", w.closed_loop_eigenvalues)))
    });
    run_check(&mut checks, "witness-stationarity-infeasible", || {
        let w = unrepresentable_gain_witness(&opts)?;
        let pass = w.stationarity.iter().all(|s| s.status == Status::Infeasible);
        let detail = w.stationarity.iter().map(|s| format!("R={}: {}", s.r, s.status)).collect::<Vec<_>>().join(", ");
        Ok(Check::flag("witness-stationarity-infeasible", pass, detail))
    });
    run_check(&mut checks, "generalized-cost-round-trip", || {
        let w = unrepresentable_gain_witness(&opts)?;
        Ok(Check::below("generalized-cost-round-trip", w.generalized_gain_error, 1e-9, "witness gain from W = I construction"))
    });
    run_check(&mut checks, "generalized-cost-round-trip-expert", || {
        let (cost, _) = generalized_cost_for_gain(sys, &reference.gain, &r, &DMatrix::identity(n, n))?;
        let (_, k) = solve_dare(sys, &cost)?;
        Ok(Check::below("generalized-cost-round-trip-expert", (&k.k - &reference.gain).norm(), 1e-9, ""))
    });
    run_check(&mut checks, "closed-loop-matching", || {
        let p = &cfg.perturbed;
        if p.d.len() != m * n {
            return Err(Error::shape("perturbation D has the wrong size"));
        }
        let d = DMatrix::from_row_slice(m, n, &p.d);
        let b = if cfg.verify.corrupt_b_sign { -&sys.b } else { sys.b.clone() };
        let plant = uncertain_plant(&LinearSystem::new(sys.a.clone(), b)?, &d, p.gamma1, p.gamma2)?;
        let k_tar = &reference.gain / p.gamma2 - &d * (p.gamma1 / p.gamma2);
        let err = (&plant.a + &plant.b * &k_tar - &reference.closed_loop).norm();
        Ok(Check::below("closed-loop-matching", err, 1e-10, "uncertain plant under the closed-form target gain"))
    });
    run_check(&mut checks, "generalized-equivalence", || {
        let outcome = cmd_perturbed(cfg)?;
        let rep = &outcome.report;
        if rep.run.status != Status::Optimal {
            return Ok(Check::flag("generalized-equivalence", false, format!("status {}", rep.run.status)));
        }
        let m1: DMatrix<f64> = rep.m1.clone().try_into()?;
        let m2: DMatrix<f64> = rep.m2.clone().try_into()?;
        let f_e: DMatrix<f64> = rep.f_expert.clone().try_into()?;
        let cost = CostWeights::new(rep.run.q_star.clone().try_into()?, r.clone(), rep.run.n_star.clone().try_into()?)?;
        let (_, k) = solve_dare(&LinearSystem::new(m1.clone(), m2.clone())?, &cost)?;
        Ok(Check::below("generalized-equivalence", (&m1 + &m2 * &k.k - &f_e).norm(), 1e-4, "DARE closed loop of recovered cost vs expert"))
    });
    run_check(&mut checks, "factor-block-psd", || {
        let mut rng = stream_rng(cfg.seed, STREAM_RANDOM_SYSTEMS);
        let mut worst = f64::INFINITY;
        for _ in 0..20 {
            let l_q = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let l_n = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            worst = worst.min(FactorPair::new(l_q, l_n, &r)?.block_min_eig());
        }
        let mut c = Check::below("factor-block-psd", -worst, 1e-9, "most negative cost-block eigenvalue, 20 random factors");
        c.residual = worst;
        Ok(c)
    });
    run_check(&mut checks, "forward-oracle-consistency", || {
        let problem = robust_problem(cfg)?;
        let population = PerturbationPopulation::new(1.0, m, n, cfg.seed)?;
        let mut rng = population.rng_for(0);
        let cost = cfg.expert_cost(sys)?;
        let mut worst = 0.0f64;
        let mut accepted = 0;
        for _ in 0..20 {
            let d = population.sample(&mut rng);
            let Ok(fwd) = problem.forward(&d, &cost) else { continue };
            accepted += 1;
            let plant = LinearSystem::new(&problem.m1 + &problem.m2 * &d, problem.m2.clone())?;
            let (p, _) = solve_dare(&plant, &cost)?;
            worst = worst.max((&fwd.p - &p.p).norm() / p.p.norm());
        }
        Ok(Check::below("forward-oracle-consistency", worst, 1e-5, format!("{accepted}/20 draws accepted")))
    });
    Ok(VerifyReport { eps: cfg.eps, solver: cfg.solver, checks })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateReport {
    pub gain: MatrixText,
    pub spectral_radius: f64,
    pub steps: usize,
    pub final_state_norm: f64,
}

/// Expert closed loop from `x0`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(SimulateReport, Trajectory)> {
    let reference = Reference::new(cfg)?;
    let sys = &reference.system;
    let gain = FeedbackGain::new(reference.gain.clone());
    let traj = simulate(sys, Policy::Gain(&gain), &cfg.x0(sys.n())?, cfg.simulate_steps)?;
    let report = SimulateReport {
        gain: (&gain.k).into(),
        spectral_radius: crate::linsys::spectral_radius(&reference.closed_loop)?,
        steps: cfg.simulate_steps,
        final_state_norm: traj.states.last().map(|x| x.norm()).unwrap_or(f64::NAN),
    };
    Ok((report, traj))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub source: String,
    pub n_d: usize,
    pub excitation: ExcitationReport,
    pub m1: Option<MatrixText>,
    pub m2: Option<MatrixText>,
    pub f_hat: Option<MatrixText>,
    pub k_hat: Option<MatrixText>,
    /// Errors against the configured system, when the data was generated from it.
    pub model_error: Option<f64>,
    pub expert_gain_error: Option<f64>,
    pub notes: Vec<String>,
}

/// Least-squares identification from a batch file, or from generated expert and excitation data.
pub fn cmd_identify(cfg: &ExperimentConfig) -> Result<(IdentifyReport, TrajectoryBatch)> {
    let mut notes = Vec::new();
    if let Some(path) = &cfg.identify.data {
        let batch = TrajectoryBatch::read_csv(std::fs::File::open(path)?)?;
        let model = regress_model(&batch).map_err(|e| notes.push(format!("model regression: {e}"))).ok();
        let expert = estimate_expert(&batch).map_err(|e| notes.push(format!("expert estimate: {e}"))).ok();
        let report = IdentifyReport {
            source: path.display().to_string(),
            n_d: batch.n_d(),
            excitation: excitation_check(&batch),
            m1: model.as_ref().map(|m| (&m.m1).into()),
            m2: model.as_ref().map(|m| (&m.m2).into()),
            f_hat: expert.as_ref().map(|(f, _)| f.into()),
            k_hat: expert.as_ref().map(|(_, k)| k.into()),
            model_error: None,
            expert_gain_error: None,
            notes,
        };
        return Ok((report, batch));
    }
    let reference = Reference::new(cfg)?;
    let sys = &reference.system;
    let data = excitation_batch(cfg, sys)?;
    let model = regress_model(&data)?;
    let mut rng = stream_rng(cfg.seed, STREAM_EXPERT);
    let expert = expert_data(sys, &FeedbackGain::new(reference.gain.clone()), cfg.data.expert_trajectories, cfg.data.expert_steps, &mut rng)?;
    let (f, k) = estimate_expert(&expert)?;
    let report = IdentifyReport {
        source: "generated".into(),
        n_d: data.n_d(),
        excitation: excitation_check(&data),
        m1: Some((&model.m1).into()),
        m2: Some((&model.m2).into()),
        f_hat: Some((&f).into()),
        k_hat: Some((&k).into()),
        model_error: Some((&model.m1 - &sys.a).norm().max((&model.m2 - &sys.b).norm())),
        expert_gain_error: Some((&k - &reference.gain).norm()),
        notes,
    };
    Ok((report, data))
}

/// Writes trajectory pairs for the perturbed run.
pub fn write_perturbed_artifacts(run: &RunDir, outcome: &PerturbedOutcome) -> Result<()> {
    write_trajectory_file(run.file("expert_trajectory.csv"), &outcome.expert_trajectory)?;
    write_trajectory_file(run.file("local_trajectory.csv"), &outcome.local_trajectory)?;
    Ok(())
}

