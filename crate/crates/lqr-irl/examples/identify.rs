//! Least-squares plant regression and expert gain estimation from noise-free data.
use lqr_irl::estimation::{estimate_expert, excitation_check, excited_data, expert_data, regress_model};
use lqr_irl::linsys::power_system;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lqr_irl::Result<()> {
    let sys = power_system::system();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = excited_data(&sys, &power_system::initial_state(), 20, 1.0, &mut rng)?;
    let report = excitation_check(&data);
    println!("excitation rank {}/{} passes={}", report.gramian_rank, report.required_rank, report.passes);
    let model = regress_model(&data)?;
    println!("M1 error {:.2e}, M2 error {:.2e}", (&model.m1 - &sys.a).norm(), (&model.m2 - &sys.b).norm());

    let expert = expert_data(&sys, &power_system::expert_gain(), 10, 5, &mut rng)?;
    let (f_hat, k_hat) = estimate_expert(&expert)?;
    println!("K_hat = {:.6}", k_hat);
    println!("F_hat = {:.6}", f_hat);
    Ok(())
}
