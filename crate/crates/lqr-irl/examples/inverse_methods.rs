//! Every nominal inverse method on an exact and a perturbed expert gain.
use lqr_irl::estimation::excited_data;
use lqr_irl::irl::{
    irl_feasibility, irl_merged, irl_model_free, irl_relaxed, irl_single_variable, perturbed_gain, IrlOptions, IrlResult,
};
use lqr_irl::linsys::power_system;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lqr_irl::Result<()> {
    let sys = power_system::system();
    let k_e = power_system::expert_gain().k;
    let r = DMatrix::identity(1, 1);
    let opts = IrlOptions::default();
    let data = excited_data(&sys, &power_system::initial_state(), 20, 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let direction = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.5]);
    for delta in [0.0, 0.5] {
        let k_hat = perturbed_gain(&k_e, delta, &direction)?;
        let f_hat = &sys.a + &sys.b * &k_e;
        let runs: Vec<IrlResult> = vec![
            irl_feasibility(&sys, &r, &k_hat, &f_hat, &opts)?,
            irl_relaxed(&sys, &r, &k_hat, &f_hat, &opts)?,
            irl_merged(&sys, &r, &k_hat, &f_hat, &opts)?,
            irl_single_variable(&sys, &r, &k_hat, &opts)?,
            irl_model_free(&data, &r, &k_hat, &opts)?,
        ];
        for res in runs {
            println!(
                "delta={delta} {:<16} {:<18} gain error {:.3e} ({:.2}s)",
                res.method.tag(),
                res.status.to_string(),
                res.gain_error(&k_e),
                res.wall_clock_s
            );
        }
    }
    Ok(())
}
