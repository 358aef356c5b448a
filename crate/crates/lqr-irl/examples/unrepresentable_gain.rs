//! A stabilizing gain that no cost without cross term produces, and a cost with one that does.
use lqr_irl::irl::{unrepresentable_gain_witness, IrlOptions};

fn main() -> lqr_irl::Result<()> {
    let w = unrepresentable_gain_witness(&IrlOptions::default())?;
    println!("gain {:.3}", w.gain);
    println!("closed-loop eigenvalues {:?}", w.closed_loop_eigenvalues);
    for s in &w.stationarity {
        println!("standard cost with R = {}: {}", s.r, s.status);
    }
    println!("generalized cost Q = {:.4}", w.generalized_cost.q);
    println!("generalized cost N = {:.4}", w.generalized_cost.n_cross);
    println!("its DARE gain differs from the witness by {:.2e}", w.generalized_gain_error);
    Ok(())
}
