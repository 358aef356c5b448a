//! Imitating the expert closed loop on a plant with uncertain input channel.
use lqr_irl::experiments::{cmd_perturbed, ExperimentConfig};
use nalgebra::DMatrix;

fn main() -> lqr_irl::Result<()> {
    let outcome = cmd_perturbed(&ExperimentConfig::default())?;
    let r = &outcome.report;
    println!("status {}", r.run.status);
    let target: DMatrix<f64> = r.target_gain.clone().try_into()?;
    let recovered: DMatrix<f64> = r.run.k_star.clone().try_into()?;
    println!("target gain {:.6?}", target.as_slice());
    println!("recovered gain {:.6?}", recovered.as_slice());
    println!("gain residual {:.2e}, closed-loop residual {:.2e}", r.gain_residual, r.closed_loop_residual);
    println!("max trajectory deviation {:.2e}", r.max_trajectory_deviation);
    Ok(())
}
