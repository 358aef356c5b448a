//! Conic solver on a Lyapunov SDP: for stable A the largest P with A'PA - P + Q >= 0 solves
//! the Stein equation P = A'PA + Q.
use lqr_irl::conic::{AffMat, ConicProgram, SolverSettings, VarShape};
use lqr_irl::linsys::{power_system, solve_stein};
use nalgebra::DMatrix;

fn main() -> lqr_irl::Result<()> {
    let a = power_system::a() * 0.9;
    let q = DMatrix::identity(3, 3);
    let mut prog = ConicProgram::new();
    let p = {
        let id = prog.add_var("P", VarShape::Symmetric(3));
        prog.expr(id)
    };
    let lmi = p.sandwich(&a.transpose(), &a) - &p + &AffMat::constant(&q);
    prog.add_psd("lyapunov", &lmi)?;
    prog.maximize(&p.trace());
    let sol = prog.solve(&SolverSettings::default());
    let exact = solve_stein(&a.transpose(), &q)?;
    println!("status {} after {} iterations", sol.status, sol.iterations);
    println!("P = {:.6}", sol.value("P"));
    println!("relative error vs Stein solution {:.2e}", (sol.value("P") - &exact).norm() / exact.norm());
    Ok(())
}
