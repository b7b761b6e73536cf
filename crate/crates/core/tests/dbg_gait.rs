#[test]
fn dbg_gait_solve() {
    use gaitforge_core::closure::fit_ik;
    use gaitforge_core::dynamics::RobotDyn;
    use gaitforge_core::gaitopt::{GaitConfig, GaitProblem};
    use gaitforge_core::model::bundled::bundled_model;
    use gaitforge_core::solver::{solve, SolveOptions};
    use std::time::Instant;

    let rd = RobotDyn::new(bundled_model("minibiped").unwrap()).unwrap();
    let sur = fit_ik(&rd, 8).unwrap();
    for sl in [0.0_f64, 0.05, 0.1] {
        let cfg = GaitConfig { step_length: sl, torso_z_min: 0.42, ..GaitConfig::default() };
        let mut gp = GaitProblem::new(&rd, cfg, &sur).unwrap();
        gp.set_threads(4);
        let t0 = Instant::now();
        let opts = SolveOptions { verbose: true, rho_max: std::env::var("RMAX").map(|v| v.parse().unwrap()).unwrap_or(1e5), rho_growth: std::env::var("RGROW").map(|v| v.parse().unwrap()).unwrap_or(5.0), ..SolveOptions::default() };
        let res = solve(&gp, &opts).unwrap();
        println!(
            "sl={sl}: outer {} inner {} conv {} viol {:.3e} cost {:.4} [{:.1}s]",
            res.outer_iters, res.inner_iters, res.converged, res.violation, res.cost,
            t0.elapsed().as_secs_f64()
        );
    }
}
