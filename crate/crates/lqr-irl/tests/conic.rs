use lqr_irl::conic::{AffMat, ConicProgram, SolverSettings, Status, VarShape};
use lqr_irl::linsys::{power_system, solve_dare};
use nalgebra::DMatrix;

#[test]
fn second_order_cone_norm() {
    let mut p = ConicProgram::new();
    let t = p.add_var("t", VarShape::Scalar);
    let te = p.expr(t);
    p.add_soc("norm", &te, &AffMat::constant(&DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0])));
    p.minimize(&te);
    let sol = p.solve(&SolverSettings::default());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.scalar("t") - 3.0).abs() < 1e-7, "{}", sol.scalar("t"));
}

#[test]
fn trace_bound_on_scalar_psd() {
    let mut p = ConicProgram::new();
    let v = p.add_var("P", VarShape::Symmetric(1));
    let e = p.expr(v);
    p.add_psd("upper", &(AffMat::scalar(1.0) - &e)).unwrap();
    p.maximize(&e.trace());
    let sol = p.solve(&SolverSettings::default());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.value("P")[(0, 0)] - 1.0).abs() < 1e-7);
}

fn contradictory_lmis(margin: f64) -> Status {
    let mut p = ConicProgram::new();
    let v = p.add_var("P", VarShape::Symmetric(2));
    let e = p.expr(v);
    p.add_psd_shifted("pos", &e, margin).unwrap();
    p.add_psd("neg", &(-&e)).unwrap();
    p.minimize(&e.trace());
    p.solve(&SolverSettings::default()).status
}

#[test]
fn contradictory_lmis_are_infeasible() {
    assert_eq!(contradictory_lmis(1.0), Status::Infeasible);
    assert_eq!(contradictory_lmis(1e-3), Status::Infeasible);
}

// A 1e-8 margin puts the certificate ratio at roundoff / margin, above the classification
// tolerance; the solver must still not report a solution.
#[test]
fn margin_below_tolerance_is_never_optimal() {
    assert_ne!(contradictory_lmis(1e-8), Status::Optimal);
}

#[test]
fn inconsistent_equalities_are_infeasible() {
    let mut p = ConicProgram::new();
    let v = p.add_var("x", VarShape::Scalar);
    let e = p.expr(v);
    p.add_eq_zero("a", &(&e - AffMat::scalar(1.0)));
    p.add_eq_zero("b", &(&e - AffMat::scalar(2.0)));
    p.minimize(&e);
    assert_eq!(p.solve(&SolverSettings::default()).status, Status::Infeasible);
}

#[test]
fn unbounded_linear_program() {
    let mut p = ConicProgram::new();
    let v = p.add_var("x", VarShape::Scalar);
    let e = p.expr(v);
    p.add_nonneg("x", &e);
    p.maximize(&e);
    assert_eq!(p.solve(&SolverSettings::default()).status, Status::Unbounded);
}

#[test]
fn riccati_lmi_recovers_dare_solution() {
    let sys = power_system::system();
    let cost = power_system::expert_cost();
    let (pv, _) = solve_dare(&sys, &cost).unwrap();
    let mut p = ConicProgram::new();
    let v = p.add_var("P", VarShape::Symmetric(3));
    let pe = p.expr(v);
    let a = &sys.a;
    let b = &sys.b;
    let tl = pe.sandwich(&a.transpose(), a) - &pe + AffMat::constant(&cost.q);
    let tr = pe.sandwich(&a.transpose(), b) + AffMat::constant(&cost.n_cross.transpose());
    let br = pe.sandwich(&b.transpose(), b) + AffMat::constant(&cost.r);
    let lmi = AffMat::block(&[vec![Some(tl), Some(tr.clone())], vec![Some(tr.t()), Some(br)]]);
    p.add_psd("riccati", &lmi).unwrap();
    p.maximize(&pe.trace());
    let sol = p.solve(&SolverSettings::default());
    assert_eq!(sol.status, Status::Optimal);
    let err = (sol.value("P") - &pv.p).amax() / pv.p.amax();
    assert!(err < 1e-5, "relative error {err}");
}
