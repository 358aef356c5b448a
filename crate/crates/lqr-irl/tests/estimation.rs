use lqr_irl::estimation::*;
use lqr_irl::experiments::{random_controllable_system, random_cost, uncertain_plant};
use lqr_irl::linsys::*;
use lqr_irl::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perturbation() -> DMatrix<f64> {
    DMatrix::from_row_slice(1, 3, &[1.105, -1.702, -2.888])
}

#[test]
fn expert_estimate_matches_dare_gain() {
    let sys = power_system::system();
    let k = power_system::expert_gain();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = expert_data(&sys, &k, 10, 5, &mut rng).unwrap();
    assert_eq!(data.n_d(), 50);
    let (f, k_hat) = estimate_expert(&data).unwrap();
    assert!((&k_hat - &k.k).norm() < 1e-8);
    assert!((&f - closed_loop(&sys, &k).unwrap()).norm() < 1e-8);
}

#[test]
fn identity_regressor_returns_next_states() {
    let c = DMatrix::from_fn(3, 3, |i, j| (i + 3 * j) as f64);
    let mut x_k = DMatrix::zeros(3, 6);
    let mut x_k1 = DMatrix::zeros(3, 6);
    for j in 0..6 {
        x_k[(j % 3, j)] = 1.0;
        x_k1.set_column(j, &c.column(j % 3));
    }
    let data = TrajectoryBatch::new(x_k, DMatrix::zeros(1, 6), x_k1).unwrap();
    let (f, k) = estimate_expert(&data).unwrap();
    assert!((f - c).norm() < 1e-13);
    assert!(k.norm() < 1e-14);
}

#[test]
fn rank_deficient_states_are_not_identifiable() {
    let x_k = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
    let data = TrajectoryBatch::new(x_k.clone(), DMatrix::zeros(1, 3), x_k).unwrap();
    assert!(matches!(estimate_expert(&data), Err(Error::Identifiability { .. })));
}

#[test]
fn zero_data_is_not_identifiable() {
    let data = TrajectoryBatch::new(DMatrix::zeros(3, 10), DMatrix::zeros(1, 10), DMatrix::zeros(3, 10)).unwrap();
    assert!(matches!(regress_model(&data), Err(Error::Identifiability { .. })));
}

#[test]
fn nominal_regression_recovers_plant() {
    let sys = power_system::system();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = excited_data(&sys, &DVector::from_element(3, 1.0), 40, 1.0, &mut rng).unwrap();
    let model = regress_model(&data).unwrap();
    assert!((&model.m1 - &sys.a).amax() < 1e-8);
    assert!((&model.m2 - &sys.b).amax() < 1e-8);
}

#[test]
fn uncertain_regression_recovers_scaled_plant() {
    let sys = power_system::system();
    let plant = uncertain_plant(&sys, &perturbation(), 2.0, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = excited_data(&plant, &DVector::from_element(3, 1.0), 40, 1.0, &mut rng).unwrap();
    let model = regress_model(&data).unwrap();
    assert!((&model.m1 - (&sys.a + &sys.b * perturbation() * 2.0)).amax() < 1e-8);
    assert!((&model.m2 - &sys.b * 2.0).amax() < 1e-8);
}

#[test]
fn target_gain_closed_form_and_matching() {
    let sys = power_system::system();
    let k_e = power_system::expert_gain().k;
    let f_e = &sys.a + &sys.b * &k_e;
    let d = perturbation();
    let plant = uncertain_plant(&sys, &d, 2.0, 2.0).unwrap();
    let model = RegressedModel { m1: plant.a.clone(), m2: plant.b.clone() };
    let target = target_gain_uncertain(&model, &f_e).unwrap();
    assert!(target.unique);
    let closed_form = &k_e / 2.0 - &d;
    assert!((&target.gain.k - &closed_form).amax() < 1e-10);
    assert!((&model.m1 + &model.m2 * &target.gain.k - &f_e).norm() < 1e-10);
}

#[test]
fn target_gain_is_zero_when_no_correction_needed() {
    let model = RegressedModel { m1: power_system::a(), m2: power_system::b() };
    let target = target_gain_uncertain(&model, &power_system::a()).unwrap();
    assert!(target.gain.k.norm() < 1e-14);
}

#[test]
fn rank_deficient_input_matrix_flags_non_unique_target() {
    let model = RegressedModel { m1: power_system::a(), m2: DMatrix::zeros(3, 1) };
    let target = target_gain_uncertain(&model, &power_system::a()).unwrap();
    assert!(!target.unique);
}

#[test]
fn excitation_from_iid_inputs_passes() {
    let sys = power_system::system();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = excited_data(&sys, &DVector::from_element(3, 1.0), 20, 1.0, &mut rng).unwrap();
    let report = excitation_check(&data);
    assert_eq!(report.required_rank, 10);
    assert!(report.passes, "{report:?}");
}

#[test]
fn constant_input_single_start_fails_excitation() {
    let sys = power_system::system();
    let inputs = vec![DVector::from_element(1, 1.0); 20];
    // Start at the equilibrium of the constant input so every column repeats.
    let x_eq = (DMatrix::identity(3, 3) - &sys.a).lu().solve(&sys.b).unwrap().column(0).into_owned();
    let traj = simulate(&sys, Policy::Inputs(&inputs), &x_eq, 20).unwrap();
    assert!(!excitation_check(&TrajectoryBatch::from_trajectory(&traj)).passes);
}

#[test]
fn too_few_columns_fail_excitation() {
    let sys = power_system::system();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = excited_data(&sys, &DVector::from_element(3, 1.0), 9, 1.0, &mut rng).unwrap();
    assert!(!excitation_check(&data).passes);
}

#[test]
fn batch_csv_round_trip() {
    let sys = power_system::system();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = excited_data(&sys, &DVector::from_element(3, 1.0), 12, 1.0, &mut rng).unwrap();
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = TrajectoryBatch::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_free_expert_estimate_is_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_controllable_system(&mut rng, 3, 1);
        // Nearly uncontrollable draws stall the Riccati iteration at its roundoff floor.
        let dare = solve_dare(&sys, &random_cost(&mut rng, 3, 1, false));
        prop_assume!(dare.is_ok());
        let (_, k) = dare.unwrap();
        let data = expert_data(&sys, &k, 10, 5, &mut rng).unwrap();
        let g = &data.x_k * data.x_k.transpose();
        let sv = lqr_irl::linalg::singular_values(&g);
        prop_assume!(sv.max() / sv.min() < 1e8);
        let (f, k_hat) = estimate_expert(&data).unwrap();
        prop_assert!((&k_hat - &k.k).norm() <= 1e-8 * (1.0 + k.k.norm()));
        prop_assert!((&f - closed_loop(&sys, &k).unwrap()).norm() <= 1e-8 * (1.0 + f.norm()));
    }

    #[test]
    fn regression_residual_vanishes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_controllable_system(&mut rng, 3, 2);
        let data = excited_data(&sys, &DVector::from_element(3, 0.1), 30, 1.0, &mut rng).unwrap();
        let z = data.stacked();
        let sv = lqr_irl::linalg::singular_values(&(&z * z.transpose()));
        prop_assume!(sv.max() / sv.min() < 1e8);
        let model = regress_model(&data).unwrap();
        let res = (&data.x_k1 - &model.m1 * &data.x_k - &model.m2 * &data.u_k).norm();
        prop_assert!(res <= 1e-9 * data.x_k1.norm());
    }

    #[test]
    fn shift_by_one_alignment(seed in any::<u64>(), steps in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_controllable_system(&mut rng, 2, 1);
        let data = excited_data(&sys, &DVector::from_element(2, 1.0), steps, 1.0, &mut rng).unwrap();
        let inputs: Vec<DVector<f64>> = (0..steps).map(|j| data.u_k.column(j).into_owned()).collect();
        let traj = simulate(&sys, Policy::Inputs(&inputs), &data.x_k.column(0).into_owned(), steps).unwrap();
        for j in 0..steps {
            let col = data.x_k1.column(j).into_owned();
            prop_assert_eq!(traj.states[j + 1].as_slice(), col.as_slice());
        }
    }
}
