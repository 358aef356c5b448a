use std::process::Command;

use lqr_irl::conic::Status;
use lqr_irl::experiments::*;
use lqr_irl::irl::Method;
use lqr_irl::linsys::power_system;
use nalgebra::DMatrix;

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 42;
    cfg.methods = vec![Method::ModelFree, Method::Generalized];
    cfg.robust.full_scale();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn partial_config_uses_defaults_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::from_toml("seed = 3\n[robust]\niterations = 10\n").unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.robust.iterations, 10);
    assert_eq!(cfg.robust.batch_size, 64);
    assert!(ExperimentConfig::from_toml("sed = 3\n").is_err());
    let files = ExperimentConfig::from_toml("[system]\nkind = \"files\"\na = \"a.json\"\nb = \"b.json\"\n").unwrap();
    assert!(matches!(files.system, SystemSource::Files { .. }));
}

#[test]
fn nominal_sweep_cells() {
    let report = cmd_nominal_sweep(&ExperimentConfig::default()).unwrap();
    assert_eq!(report.cells.len(), 4 * (1 + 3 * 5));
    assert_eq!(report.numerical_failures(), 0);
    for method in [Method::Feasibility, Method::Relaxed, Method::Merged] {
        assert!(report.cell(0.0, 0, method).unwrap().gain_error <= 1e-6);
    }
    assert!(report.cell(0.0, 0, Method::ModelFree).unwrap().gain_error <= 1e-4);
    for c in &report.cells {
        assert!(c.gain_error.is_finite() || matches!(c.status, Status::Infeasible | Status::NumericalFailure));
    }
    for dir in 0..5 {
        assert_eq!(report.cell(2.5, dir, Method::Feasibility).unwrap().status, Status::Infeasible);
    }
}

#[test]
fn perturbed_case_recovers_target_gain() {
    let outcome = cmd_perturbed(&ExperimentConfig::default()).unwrap();
    let r = &outcome.report;
    assert_eq!(r.run.status, Status::Optimal);
    assert!(r.gain_residual <= 1e-5);
    assert!(r.closed_loop_residual <= 1e-5);
    assert!(r.max_trajectory_deviation <= 1e-3);
    assert_eq!(outcome.expert_trajectory.states.len(), 51);
}

#[test]
fn degenerate_perturbation_reduces_to_nominal_recovery() {
    let mut cfg = ExperimentConfig::default();
    cfg.perturbed.d = vec![0.0; 3];
    cfg.perturbed.gamma1 = 1.0;
    cfg.perturbed.gamma2 = 1.0;
    let outcome = cmd_perturbed(&cfg).unwrap();
    let k: DMatrix<f64> = outcome.report.run.k_star.clone().try_into().unwrap();
    assert!((k - power_system::expert_gain().k).norm() <= 1e-5);
}

#[test]
fn verify_suite_passes() {
    let report = cmd_verify(&ExperimentConfig::default()).unwrap();
    for c in &report.checks {
        assert!(c.pass, "{} residual {} detail {}", c.name, c.residual, c.detail);
    }
    assert!(report.checks.len() >= 15);
}

#[test]
fn flipped_input_sign_breaks_closed_loop_matching() {
    let mut cfg = ExperimentConfig::default();
    cfg.verify.corrupt_b_sign = true;
    let report = cmd_verify(&cfg).unwrap();
    let check = report.get("closed-loop-matching").unwrap();
    assert!(!check.pass);
    assert!(check.residual >= 1e-2);
}

#[test]
fn identify_from_generated_and_file_data() {
    let (report, batch) = cmd_identify(&ExperimentConfig::default()).unwrap();
    assert!(report.excitation.passes);
    assert!(report.model_error.unwrap() < 1e-8);
    assert!(report.expert_gain_error.unwrap() < 1e-8);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.csv");
    batch.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.identify.data = Some(path);
    let (from_file, _) = cmd_identify(&cfg).unwrap();
    assert_eq!(from_file.m1, report.m1);
    assert!(from_file.model_error.is_none());
}

#[test]
fn matrix_file_system_source() {
    let dir = tempfile::tempdir().unwrap();
    lqr_irl::io::write_matrix(dir.path().join("a.json"), &power_system::a()).unwrap();
    lqr_irl::io::write_matrix(dir.path().join("b.json"), &power_system::b()).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.system = SystemSource::Files { a: dir.path().join("a.json"), b: dir.path().join("b.json") };
    let (report, _) = cmd_simulate(&cfg).unwrap();
    let (builtin, _) = cmd_simulate(&ExperimentConfig::default()).unwrap();
    assert_eq!(report.spectral_radius, builtin.spectral_radius);
    assert!(report.spectral_radius < 1.0);
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lqr-irl")).args(args).output().unwrap()
}

#[test]
fn cli_writes_reproducible_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).display().to_string();
    for run in ["first", "second"] {
        let o = run_cli(&["--out", &out(run), "--seed", "7", "nominal-sweep"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let table = |run: &str| {
        let text = std::fs::read_to_string(dir.path().join(run).join("nominal-sweep/table.csv")).unwrap();
        // Drop the wall-clock column.
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(table("first"), table("second"));
    let resolved = std::fs::read_to_string(dir.path().join("first/nominal-sweep/config.resolved")).unwrap();
    let cfg = ExperimentConfig::from_toml(&resolved).unwrap();
    assert_eq!(cfg.seed, 7);
    assert!(dir.path().join("first/nominal-sweep/report.json").exists());
}

#[test]
fn cli_subcommands_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    for cmd in ["perturbed", "verify", "simulate", "identify"] {
        let o = run_cli(&["--out", &out, "--eps", "1e-8", "--solver-tol", "1e-10", cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["perturbed/expert_trajectory.csv", "perturbed/local_trajectory.csv", "simulate/trajectory.csv", "identify/batch.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let verify = String::from_utf8(run_cli(&["--out", &out, "verify"]).stdout).unwrap();
    assert!(!verify.contains("FAIL"), "{verify}");
}

#[test]
fn cli_short_robust_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("robust.toml");
    std::fs::write(
        &cfg_path,
        "[robust]\niterations = 2\nbatch_size = 4\nmode = \"implicit\"\nmonte_carlo = 10\nhorizon = 5\n",
    )
    .unwrap();
    let out = dir.path().join("out").display().to_string();
    let o = run_cli(&["--config", cfg_path.to_str().unwrap(), "--out", &out, "robust"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let history = std::fs::read_to_string(dir.path().join("out/robust/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let envelopes = std::fs::read_to_string(dir.path().join("out/robust/envelopes.csv")).unwrap();
    assert!(envelopes.starts_with("sigma,k,state_index,mean,variance,controller_tag"));
    assert_eq!(envelopes.lines().count(), 1 + 3 * 6 * 3 * 2);
}

#[test]
fn cli_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "unknown = 1\n").unwrap();
    let o = run_cli(&["--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn readme_config_example_parses() {
    let readme = include_str!("../../../README.md");
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = ExperimentConfig::from_toml(block).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.robust.iterations, 200);
}
