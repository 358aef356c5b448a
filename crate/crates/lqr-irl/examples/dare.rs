//! Expert LQR controller for the power-system plant.
use lqr_irl::linsys::{closed_loop, dare_residual, power_system, solve_dare, spectral_radius};

fn main() -> lqr_irl::Result<()> {
    let sys = power_system::system();
    let cost = power_system::expert_cost();
    let (p, k) = solve_dare(&sys, &cost)?;
    println!("P = {:.6}", p.p);
    println!("K = {:.6}", k.k);
    println!("rounded reference gain = {:.3}", power_system::rounded_gain());
    println!("DARE residual = {:.2e}", dare_residual(&sys, &cost, &p.p));
    println!("closed-loop spectral radius = {:.6}", spectral_radius(&closed_loop(&sys, &k)?)?);
    Ok(())
}
