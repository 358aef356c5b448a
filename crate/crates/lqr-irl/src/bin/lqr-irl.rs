use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqr_irl::experiments::{
    cmd_identify, cmd_nominal_sweep, cmd_perturbed, cmd_robust, cmd_simulate, cmd_verify, write_perturbed_artifacts,
    ExperimentConfig, RunDir,
};
use lqr_irl::io::write_trajectory_file;
use lqr_irl::Result;

#[derive(Parser)]
#[command(name = "lqr-irl", about = "Inverse LQR experiments on the power-system case study")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shift for strict matrix inequalities.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Interior-point optimality tolerance.
    #[arg(long, global = true)]
    solver_tol: Option<f64>,
    /// Robust training with batch 526 and 7000 iterations.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gain-error table over perturbation sizes and methods.
    NominalSweep,
    /// Identification and generalized recovery on the perturbed plant.
    Perturbed,
    /// Robust training and Monte Carlo evaluation.
    Robust,
    /// Cross-module oracle checks.
    Verify,
    /// Expert closed-loop trajectory.
    Simulate,
    /// Least-squares identification from data.
    Identify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::NominalSweep => "nominal-sweep",
            Command::Perturbed => "perturbed",
            Command::Robust => "robust",
            Command::Verify => "verify",
            Command::Simulate => "simulate",
            Command::Identify => "identify",
        }
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(eps) = cli.eps {
        cfg.eps = eps;
    }
    if let Some(tol) = cli.solver_tol {
        cfg.solver.tol = tol;
    }
    if cli.full_scale {
        cfg.robust.full_scale();
    }
    Ok(cfg)
}

/// Returns the number of numerical failures.
fn run(cli: &Cli) -> Result<usize> {
    let cfg = resolve(cli)?;
    let dir = RunDir::create(&cfg, cli.command.name())?;
    match cli.command {
        Command::NominalSweep => {
            let report = cmd_nominal_sweep(&cfg)?;
            report.write_table(std::fs::File::create(dir.file("table.csv"))?)?;
            dir.write_report(&report)?;
            for c in &report.cells {
                println!(
                    "delta={:<4} dir={} {:<16} {:<18} gain_error={:.3e}",
                    c.delta.unwrap_or(0.0),
                    c.direction.unwrap_or(0),
                    c.method_tag,
                    c.status.to_string(),
                    c.gain_error
                );
            }
            Ok(report.numerical_failures())
        }
        Command::Perturbed => {
            let outcome = cmd_perturbed(&cfg)?;
            write_perturbed_artifacts(&dir, &outcome)?;
            dir.write_report(&outcome.report)?;
            let r = &outcome.report;
            println!(
                "status={} gain_residual={:.3e} closed_loop_residual={:.3e} max_trajectory_deviation={:.3e}",
                r.run.status, r.gain_residual, r.closed_loop_residual, r.max_trajectory_deviation
            );
            Ok(usize::from(r.run.is_numerical_failure()))
        }
        Command::Robust => {
            let report = cmd_robust(&cfg, Some(&dir))?;
            dir.write_report(&report)?;
            let t = &report.training;
            println!(
                "iterations={} loss {:.4e} -> {:.4e} (window means {:.4e} -> {:.4e}) drift Q {:.2e} N {:.2e}",
                t.iterations, t.initial_loss, t.final_loss, t.head_mean, t.tail_mean, t.drift_q, t.drift_n
            );
            for e in &report.evaluations {
                println!("sigma={} accepted={} rejected={} variance={:?}", e.sigma, e.accepted, e.rejected, e.mean_variance);
            }
            Ok(0)
        }
        Command::Verify => {
            let report = cmd_verify(&cfg)?;
            dir.write_report(&report)?;
            for c in &report.checks {
                let verdict = if c.pass { "PASS" } else { "FAIL" };
                println!("{verdict} {:<36} residual={:.3e} threshold={:.1e} {}", c.name, c.residual, c.threshold, c.detail);
            }
            Ok(0)
        }
        Command::Simulate => {
            let (report, traj) = cmd_simulate(&cfg)?;
            write_trajectory_file(dir.file("trajectory.csv"), &traj)?;
            dir.write_report(&report)?;
            println!("spectral_radius={:.6} final_state_norm={:.3e}", report.spectral_radius, report.final_state_norm);
            Ok(0)
        }
        Command::Identify => {
            let (report, batch) = cmd_identify(&cfg)?;
            batch.write_csv(std::fs::File::create(dir.file("batch.csv"))?)?;
            dir.write_report(&report)?;
            println!(
                "n_d={} excitation rank {}/{} passes={}",
                report.n_d, report.excitation.gramian_rank, report.excitation.required_rank, report.excitation.passes
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) reported numerical_failure");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
