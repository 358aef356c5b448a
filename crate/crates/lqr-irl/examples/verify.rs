//! Cross-module oracle checks.
use lqr_irl::experiments::{cmd_verify, ExperimentConfig};

fn main() -> lqr_irl::Result<()> {
    let report = cmd_verify(&ExperimentConfig::default())?;
    for c in &report.checks {
        println!("{} {:<36} {:.2e} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.residual, c.detail);
    }
    Ok(())
}
