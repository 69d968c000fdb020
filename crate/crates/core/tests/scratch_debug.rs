//! Temporary diagnostics; deleted before release.

use gpcscp::scenario::bundled;
use gpcscp::scp::build_subproblem;
use gpcscp_conic::solve;

#[test]
#[ignore]
fn first_subproblem_status() {
    let scenario = bundled("fig4").expect("bundled scenario");
    let pd = scenario.build_projection(None).expect("projection");

    for variant in ["full", "eps-0.5", "sigma-0.01", "gauss", "mean-only-terminal"] {
        let mut scn = scenario.clone();
        if variant == "sigma-0.01" {
            scn.sigma = 0.01;
        }
        if variant == "gauss" {
            scn.flavor = gpcscp::scenario::Flavor::Gaussian;
        }
        let pd = scn.build_projection(None).expect("projection");
        let mut prob = scn.to_problem(pd, scn.horizon).expect("problem");
        if variant == "eps-0.5" {
            prob.eps_col = 0.5;
        }
        if variant == "mean-only-terminal" {
            // Pin position means only: drop velocity/attitude rows.
            let t = prob.terminal.as_mut().unwrap();
            t.xf_mean = t.xf_mean.rows(0, 2).into_owned();
        }
        let nominal = scn.initial_nominal(&prob).expect("seed");
        let (program, _layout) = build_subproblem(&prob, &nominal, (10.0, 5.0), 1e4).expect("build");
        let t0 = std::time::Instant::now();
        let sol = solve(&program, 1e-8, 100).expect("solve");
        println!(
            "{variant}: n={} eq={} status {:?} time {:.2?}",
            program.n,
            program.eq_rhs.len(),
            sol.status,
            t0.elapsed(),
        );
    }
}
