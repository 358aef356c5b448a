//! A short robust cost-learning run with implicit gradients.
use lqr_irl::experiments::{robust_problem, summarize_training, training_population, ExperimentConfig};
use lqr_irl::robust::{train, FactorPair, GradientMode, TrainingState};

fn main() -> lqr_irl::Result<()> {
    let cfg = ExperimentConfig::default();
    let problem = robust_problem(&cfg)?;
    let population = training_population(&cfg, &problem)?;
    let mut training = cfg.robust.training();
    training.iterations = 30;
    training.batch_size = 16;
    training.mode = GradientMode::Implicit;
    let r = cfg.r_matrix(problem.m2.ncols());
    let mut state = TrainingState::new(FactorPair::initial(problem.m1.nrows(), &r)?, cfg.seed);
    train(&problem, &population, &training, &mut state)?;
    for h in state.history.iter().step_by(5) {
        println!("iter {:>3} loss {:.5e} |Q| {:.4} |N| {:.4}", h.iter, h.loss, h.norm_q, h.norm_n);
    }
    let s = summarize_training(&state, None);
    println!("Q = {:.4}", state.factors.q());
    println!("N = {:.4}", state.factors.n_cross());
    println!("min cost-block eigenvalue {:.3e}", s.min_block_eig);
    Ok(())
}
