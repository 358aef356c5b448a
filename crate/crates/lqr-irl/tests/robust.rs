use lqr_irl::conic::SolverSettings;
use lqr_irl::experiments::{robust_problem, ExperimentConfig};
use lqr_irl::linsys::*;
use lqr_irl::robust::*;
use lqr_irl::Error;
use nalgebra::{DMatrix, DVector};

fn problem() -> RobustProblem {
    robust_problem(&ExperimentConfig::default()).unwrap()
}

fn expert_factors() -> FactorPair {
    FactorPair::initial(3, &DMatrix::identity(1, 1)).unwrap()
}

fn batch(problem: &RobustProblem, sigma: f64, size: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let pop = PerturbationPopulation::new(sigma, 1, 3, seed).unwrap();
    let cost = expert_factors().cost().unwrap();
    draw_batch(problem, &pop, &cost, size, 3, &mut pop.rng_for(0)).unwrap().0
}

#[test]
fn zero_perturbation_reproduces_expert_closed_loop() {
    let pb = problem();
    let cost = expert_factors().cost().unwrap();
    let sol = pb.forward(&DMatrix::zeros(1, 3), &cost).unwrap();
    assert!((&sol.f - &pb.f_expert).norm() <= 1e-5);
    let loss = batch_loss(&pb, &expert_factors(), &[DMatrix::zeros(1, 3)]).unwrap();
    assert!(loss <= 1e-8, "{loss}");
}

#[test]
fn forward_solves_agree_with_dare_oracle() {
    let pb = problem();
    let factors = FactorPair::new(DMatrix::identity(3, 3) * 1.3, DMatrix::from_column_slice(3, 1, &[0.2, -0.1, 0.3]), &DMatrix::identity(1, 1)).unwrap();
    let cost = factors.cost().unwrap();
    for d in batch(&pb, 1.0, 16, 5) {
        let sol = pb.forward(&d, &cost).unwrap();
        let plant = LinearSystem::new(&pb.m1 + &pb.m2 * &d, pb.m2.clone()).unwrap();
        let (p, k) = solve_dare(&plant, &cost).unwrap();
        assert!((&sol.p - &p.p).norm() <= 1e-5 * p.p.norm());
        assert!((&sol.k - &k.k).norm() <= 1e-5 * (1.0 + k.k.norm()));
        assert!(dare_residual(&plant, &cost, &sol.p) <= 1e-6 * (1.0 + p.p.norm()));
        assert!(is_stable(&sol.f).unwrap());
    }
}

#[test]
fn expert_cost_loss_fixture() {
    // Regression fixture: seeded batch of 64 at sigma = 1 under the expert cost.
    let pb = problem();
    let samples = batch(&pb, 1.0, 64, 11);
    let loss = batch_loss(&pb, &expert_factors(), &samples).unwrap();
    assert!(loss > 0.0);
    assert!((loss - EXPERT_LOSS_FIXTURE).abs() <= 1e-9 * EXPERT_LOSS_FIXTURE, "{loss:.15e}");
}

const EXPERT_LOSS_FIXTURE: f64 = 1.806515152392547e-2;

/// Scalar DARE solution by fixed-point iteration.
fn scalar_dare(a: f64, b: f64, q: f64, r: f64, n: f64) -> f64 {
    let mut p = q;
    for _ in 0..100_000 {
        let next = q + a * a * p - (a * b * p + n).powi(2) / (r + b * b * p);
        if (next - p).abs() < 1e-15 * (1.0 + p) {
            return next;
        }
        p = next;
    }
    p
}

#[test]
fn scalar_gradient_matches_closed_form() {
    let (a, b, d, f_e) = (1.2, 1.0, 0.1, 0.3);
    let (lq, ln) = (1.3, 0.2);
    let pb = RobustProblem {
        m1: DMatrix::from_element(1, 1, a),
        m2: DMatrix::from_element(1, 1, b),
        f_expert: DMatrix::from_element(1, 1, f_e),
        settings: SolverSettings::default(),
    };
    let factors = FactorPair::new(DMatrix::from_element(1, 1, lq), DMatrix::from_element(1, 1, ln), &DMatrix::identity(1, 1)).unwrap();
    let samples = vec![DMatrix::from_element(1, 1, d)];

    let aj = a + b * d;
    let (q, r, n) = (lq * lq + ln * ln, 1.0, ln);
    let p = scalar_dare(aj, b, q, r, n);
    let s = r + b * b * p;
    let l = aj * b * p + n;
    let g_p = aj * aj - (2.0 * aj * b * l * s - l * l * b * b) / (s * s) - 1.0;
    let dp_dq = -1.0 / g_p;
    let dk_dp = -(aj * b * s - l * b * b) / (s * s);
    let f = aj - b * l / s;
    let expected = 2.0 * (f - f_e) * b * dk_dp * dp_dq * 2.0 * lq;

    for mode in [GradientMode::FiniteDifference, GradientMode::Implicit] {
        let g = gradient(&pb, &factors, &samples, mode).unwrap();
        assert!((g[0] - expected).abs() <= 1e-4 * expected.abs(), "{mode:?}: {} vs {expected}", g[0]);
    }
}

#[test]
fn finite_difference_and_implicit_gradients_agree() {
    let pb = problem();
    let samples = batch(&pb, 1.0, 8, 12);
    let factors = FactorPair::new(DMatrix::identity(3, 3) * 1.1, DMatrix::from_column_slice(3, 1, &[0.1, 0.05, -0.2]), &DMatrix::identity(1, 1)).unwrap();
    let fd = gradient(&pb, &factors, &samples, GradientMode::FiniteDifference).unwrap();
    let imp = gradient(&pb, &factors, &samples, GradientMode::Implicit).unwrap();
    assert!((&fd - &imp).norm() <= 1e-3 * fd.norm(), "{fd} {imp}");
}

#[test]
fn loss_is_invariant_under_rotations_of_l_q() {
    let pb = problem();
    let samples = batch(&pb, 1.0, 8, 13);
    let l_q = DMatrix::from_row_slice(3, 3, &[1.2, 0.1, 0.0, -0.3, 0.9, 0.2, 0.1, 0.4, 1.1]);
    let factors = FactorPair::new(l_q.clone(), DMatrix::from_column_slice(3, 1, &[0.1, 0.0, 0.2]), &DMatrix::identity(1, 1)).unwrap();
    let grad = gradient(&pb, &factors, &samples, GradientMode::Implicit).unwrap();
    let skew = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -0.5, -1.0, 0.0, 0.3, 0.5, -0.3, 0.0]);
    let direction = &l_q * &skew;
    let mut dir_flat = DVector::zeros(grad.len());
    dir_flat.rows_mut(0, 9).copy_from_slice(direction.as_slice());
    let directional = grad.dot(&dir_flat);
    assert!(directional.abs() <= 1e-6 * (1.0 + grad.norm()), "{directional}");
}

#[test]
fn zero_sigma_training_stays_at_expert() {
    let pb = problem();
    let pop = PerturbationPopulation::new(0.0, 1, 3, 1).unwrap();
    let config = TrainingConfig { iterations: 5, batch_size: 4, mode: GradientMode::Implicit, ..TrainingConfig::default() };
    let mut state = TrainingState::new(expert_factors(), 1);
    train(&pb, &pop, &config, &mut state).unwrap();
    let losses = state.losses();
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    assert!(*losses.last().unwrap() <= 1e-6);
    let k = pb.forward(&DMatrix::zeros(1, 3), &state.factors.cost().unwrap()).unwrap().k;
    assert!((k - power_system::expert_gain().k).norm() <= 1e-3);
}

#[test]
fn short_training_is_deterministic_and_feasible() {
    let pb = problem();
    let pop = PerturbationPopulation::new(1.0, 1, 3, 9).unwrap();
    let config = TrainingConfig { iterations: 3, batch_size: 6, ..TrainingConfig::default() };
    let run = || {
        let mut state = TrainingState::new(expert_factors(), 9);
        train(&pb, &pop, &config, &mut state).unwrap();
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 3);
    assert!(a.history.iter().all(|h| h.block_min_eig >= -1e-9 && h.loss.is_finite()));
    let mut csv = Vec::new();
    a.write_history_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("iter,loss,normQ,normN,step,rejections\n"));
}

#[test]
fn unstabilizable_population_aborts() {
    let pb = RobustProblem {
        m1: DMatrix::identity(2, 2) * 1.5,
        m2: DMatrix::zeros(2, 1),
        f_expert: DMatrix::zeros(2, 2),
        settings: SolverSettings::default(),
    };
    let pop = PerturbationPopulation::new(1.0, 1, 2, 0).unwrap();
    let mut state = TrainingState::new(FactorPair::initial(2, &DMatrix::identity(1, 1)).unwrap(), 0);
    let config = TrainingConfig { iterations: 2, batch_size: 4, ..TrainingConfig::default() };
    let err = train(&pb, &pop, &config, &mut state).unwrap_err();
    assert!(matches!(err, Error::PopulationTooWild { .. }), "{err}");
    assert!(state.history.is_empty());
}

#[test]
fn zero_sigma_envelopes_have_no_variance() {
    let pb = problem();
    let costs = vec![("expert".to_string(), expert_factors().cost().unwrap())];
    let eval = EvaluationSettings { monte_carlo: 5, horizon: 10, x0: DVector::from_element(3, 1.0), seed: 0 };
    let (rows, summary) = evaluate_robustness(&pb, &costs, 0.0, &eval).unwrap();
    assert_eq!(rows.len(), 11 * 3);
    assert!(rows.iter().all(|r| r.variance <= 1e-28), "rounding only");
    assert_eq!(summary.rejected, 0);
}

#[test]
fn factorization_keeps_cost_block_psd() {
    let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let f = FactorPair::new(DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.7), DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64), &r).unwrap();
    assert!(f.block_min_eig() >= -1e-9);
    assert!((f.r() - &r).norm() < 1e-14);
    assert_eq!(f.with_flat(&f.flat()), f);
}

#[test]
fn step_schedules() {
    let s = StepSchedule::Decaying { eta0: 0.05, tau: 500.0 };
    assert_eq!(s.at(0), 0.05);
    assert!((s.at(500) - 0.025).abs() < 1e-15);
    assert_eq!(StepSchedule::Constant { eta: 0.1 }.at(1000), 0.1);
}
