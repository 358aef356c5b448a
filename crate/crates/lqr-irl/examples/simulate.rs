//! Closed-loop rollout of the expert gain from x0 = [1, 1, 1].
use lqr_irl::linsys::{power_system, simulate, Policy};

fn main() -> lqr_irl::Result<()> {
    let sys = power_system::system();
    let gain = power_system::expert_gain();
    let traj = simulate(&sys, Policy::Gain(&gain), &power_system::initial_state(), 30)?;
    for (k, x) in traj.states.iter().enumerate().step_by(5) {
        println!("k={k:>2} x={:.4?}", x.as_slice());
    }
    Ok(())
}
