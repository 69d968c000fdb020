//! Homogeneous self-dual interior-point iteration.
//!
//! The embedding introduces `tau, kappa >= 0` and seeks a nonzero solution of
//!
//! ```text
//!   E1:  A'y + G'z + c tau          = 0
//!   E2: -A x            + b tau     = 0
//!   E3: -G x            + h tau - s = 0
//!   E4: -c'x - b'y - h'z - kappa    = 0
//! ```
//!
//! with `s, z` in the cone and `s o z = 0`, `tau kappa = 0`. A solution with
//! `tau > 0` recovers the optimum as `(x, y, z, s)/tau`; a ray with
//! `kappa > 0` certifies primal or dual infeasibility. Directions follow the
//! Nesterov-Todd scaled Newton system with a Mehrotra predictor-corrector.

use crate::cones::{
    self, apply_scaling, barrier_degree, jordan_product, jordan_solve, membership_margin,
    nt_scaling, push_interior, step_to_boundary, BlockScaling, Scalings,
};
use crate::kkt::KktSystem;
use crate::{ConeProgram, ConeSolution, ConicError, SolveStatus};

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub frac_to_boundary: f64,
    /// Static regularization added to the KKT diagonal.
    pub static_reg: f64,
    /// Iterative-refinement rounds per KKT solve.
    pub refine_rounds: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iter: 100,
            frac_to_boundary: 0.99,
            static_reg: 1e-9,
            refine_rounds: 2,
        }
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn identity_scalings(cones: &[crate::ConeSpec]) -> Scalings {
    cones
        .iter()
        .map(|c| match c {
            crate::ConeSpec::Orthant(n) => BlockScaling::Orthant { w: vec![1.0; *n] },
            crate::ConeSpec::SecondOrder(n) => {
                let mut wb = vec![0.0; *n];
                wb[0] = 1.0;
                BlockScaling::Soc { eta: 1.0, wb }
            }
        })
        .collect()
}

pub fn solve_with(
    program: &ConeProgram,
    settings: &SolverSettings,
) -> Result<ConeSolution, ConicError> {
    if settings.tol <= 0.0 {
        return Err(ConicError::BadTolerance);
    }
    program.validate()?;

    // equilibrate cost and right-hand sides to unit scale so termination
    // quality (and hence the argmin) is invariant under data rescaling
    let gamma_c = {
        let g = norm_inf(&program.cost);
        if g > 0.0 { g } else { 1.0 }
    };
    let gamma_b = {
        let g = norm_inf(&program.eq_rhs).max(norm_inf(&program.ineq_rhs));
        if g > 0.0 { g } else { 1.0 }
    };
    if gamma_c != 1.0 || gamma_b != 1.0 {
        let mut scaled = program.clone();
        for v in &mut scaled.cost {
            *v /= gamma_c;
        }
        for v in &mut scaled.eq_rhs {
            *v /= gamma_b;
        }
        for v in &mut scaled.ineq_rhs {
            *v /= gamma_b;
        }
        let mut sol = solve_inner(&scaled, settings)?;
        for v in &mut sol.primal {
            *v *= gamma_b;
        }
        for v in &mut sol.slack {
            *v *= gamma_b;
        }
        for v in &mut sol.eq_dual {
            *v *= gamma_c;
        }
        for v in &mut sol.cone_dual {
            *v *= gamma_c;
        }
        sol.objective *= gamma_c * gamma_b;
        sol.gap *= gamma_c * gamma_b;
        sol.primal_residual *= gamma_b;
        sol.dual_residual *= gamma_c;
        return Ok(sol);
    }
    solve_inner(program, settings)
}

fn solve_inner(
    program: &ConeProgram,
    settings: &SolverSettings,
) -> Result<ConeSolution, ConicError> {
    faer::set_global_parallelism(faer::Parallelism::None);

    let n = program.n;
    let p = program.eq_matrix.nrows();
    let m = program.ineq_matrix.nrows();
    let mut kkt = KktSystem::new(program, settings.static_reg, settings.refine_rounds);

    if m == 0 {
        return Ok(solve_equality_only(program, &mut kkt));
    }

    let nu = barrier_degree(&program.cones) as f64;
    let c = &program.cost;
    let b = &program.eq_rhs;
    let h = &program.ineq_rhs;

    // initial point from two least-norm solves at identity scaling
    let ident = identity_scalings(&program.cones);
    kkt.factor(program, &ident);
    let (x0, _, zh) = kkt.solve_full(program, &ident, &vec![0.0; n], b, h);
    let mut s: Vec<f64> = zh.iter().map(|v| -v).collect();
    push_interior(&program.cones, &mut s);
    let neg_c: Vec<f64> = c.iter().map(|v| -v).collect();
    let (_, y0, mut z) = kkt.solve_full(program, &ident, &neg_c, &vec![0.0; p], &vec![0.0; m]);
    push_interior(&program.cones, &mut z);
    let mut x = x0;
    let mut y = y0;
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;

    let mut e = vec![0.0; m];
    cones::identity(&program.cones, &mut e);

    // best iterate by worst normalized violation; returned when the loop
    // stalls or the scaling degenerates at the cone boundary
    let mut best: Option<(f64, ConeSolution)> = None;

    for iter in 0..settings.max_iter {
        // residuals of the embedding
        let mut r1 = vec![0.0; n]; // A'y + G'z + c tau
        program.eq_matrix.mul_transpose_add(&y, &mut r1);
        program.ineq_matrix.mul_transpose_add(&z, &mut r1);
        for i in 0..n {
            r1[i] += c[i] * tau;
        }
        let mut ax = vec![0.0; p];
        program.eq_matrix.mul_vec(&x, &mut ax);
        let r2: Vec<f64> = (0..p).map(|i| -ax[i] + b[i] * tau).collect();
        let mut gx = vec![0.0; m];
        program.ineq_matrix.mul_vec(&x, &mut gx);
        let r3: Vec<f64> = (0..m).map(|i| -gx[i] + h[i] * tau - s[i]).collect();
        let cx = dot(c, &x);
        let byhz = dot(b, &y) + dot(h, &z);
        let r4 = -cx - byhz - kappa;

        let mu = (dot(&s, &z) + tau * kappa) / (nu + 1.0);

        // convergence on the scaled point
        let pres = {
            let ares = (0..p)
                .map(|i| (ax[i] / tau - b[i]).abs())
                .fold(0.0f64, f64::max);
            let gres = (0..m)
                .map(|i| (gx[i] / tau + s[i] / tau - h[i]).abs())
                .fold(0.0f64, f64::max);
            (ares / (1.0 + norm_inf(b))).max(gres / (1.0 + norm_inf(h)))
        };
        let dres = {
            let mut d = c.clone();
            for (i, v) in d.iter_mut().enumerate() {
                *v += r1[i] / tau - c[i]; // (A'y + G'z)/tau + c
            }
            norm_inf(&d) / (1.0 + norm_inf(c))
        };
        let pcost = cx / tau;
        let dcost = -byhz / tau;
        let gap_abs = dot(&s, &z) / (tau * tau);
        let relgap = gap_abs / f64::max(1.0, pcost.abs().max(dcost.abs()));

        let merit = pres.max(dres).max(relgap);
        if best.as_ref().is_none_or(|(m, _)| merit < *m) {
            best = Some((
                merit,
                make_solution(program, &x, &y, &z, &s, tau, SolveStatus::MaxIterations, iter),
            ));
        }
        if pres <= settings.tol && dres <= settings.tol && relgap <= settings.tol {
            return Ok(make_solution(program, &x, &y, &z, &s, tau, SolveStatus::Optimal, iter));
        }

        // infeasibility certificates from the homogeneous ray
        if byhz < 0.0 {
            let theta = -1.0 / byhz;
            let mut cert = vec![0.0; n];
            program.eq_matrix.mul_transpose_add(&y, &mut cert);
            program.ineq_matrix.mul_transpose_add(&z, &mut cert);
            if norm_inf(&cert) * theta <= settings.tol * (1.0 + norm_inf(c)) {
                let yc: Vec<f64> = y.iter().map(|v| v * theta).collect();
                let zc: Vec<f64> = z.iter().map(|v| v * theta).collect();
                let mut sol =
                    make_solution(program, &x, &yc, &zc, &s, 1.0, SolveStatus::PrimalInfeasible, iter);
                sol.eq_dual = yc;
                sol.cone_dual = zc;
                return Ok(sol);
            }
        }
        if cx < 0.0 {
            let theta = -1.0 / cx;
            let feas = norm_inf(&ax).max(
                (0..m)
                    .map(|i| (gx[i] + s[i]).abs())
                    .fold(0.0f64, f64::max),
            );
            if feas * theta <= settings.tol {
                let xc: Vec<f64> = x.iter().map(|v| v * theta).collect();
                let mut sol =
                    make_solution(program, &xc, &y, &z, &s, 1.0, SolveStatus::DualInfeasible, iter);
                sol.primal = xc;
                return Ok(sol);
            }
        }
        if tau < 1e-12 && kappa < 1e-12 {
            break;
        }
        // cone-boundary degeneracy: the NT scaling loses all precision once a
        // margin shrinks to rounding level, so stop and keep the best iterate
        if membership_margin(&program.cones, &s) <= 1e-14 * (1.0 + norm_inf(&s))
            || membership_margin(&program.cones, &z) <= 1e-14 * (1.0 + norm_inf(&z))
        {
            break;
        }

        // NT scaling and factorization
        let mut lambda = vec![0.0; m];
        let scal = nt_scaling(&program.cones, &s, &z, &mut lambda);
        kkt.factor(program, &scal);
        let (u1x, u1y, u1z) = kkt.solve_full(program, &scal, &neg_c, b, h);
        let cbh1 = dot(c, &u1x) + dot(b, &u1y) + dot(h, &u1z);

        let mut lam_lam = vec![0.0; m];
        jordan_product(&program.cones, &lambda, &lambda, &mut lam_lam);

        // shared direction computation for a given complementarity target
        let direction = |kkt: &KktSystem,
                         ds_target: &[f64],
                         dkt: f64,
                         rscale: f64|
         -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64) {
            let mut lam_inv_d = vec![0.0; m];
            jordan_solve(&program.cones, &lambda, ds_target, &mut lam_inv_d);
            let mut w_lam_inv_d = vec![0.0; m];
            apply_scaling(&program.cones, &scal, &lam_inv_d, &mut w_lam_inv_d, false);
            let bx: Vec<f64> = r1.iter().map(|v| -v * rscale).collect();
            let by2: Vec<f64> = r2.iter().map(|v| v * rscale).collect();
            let bz: Vec<f64> = (0..m).map(|i| r3[i] * rscale - w_lam_inv_d[i]).collect();
            let (u2x, u2y, u2z) = kkt.solve_full(program, &scal, &bx, &by2, &bz);
            let cbh2 = dot(c, &u2x) + dot(b, &u2y) + dot(h, &u2z);
            let dtau = (dkt / tau - r4 * rscale + cbh2) / (kappa / tau - cbh1);
            let dx: Vec<f64> = (0..n).map(|i| u2x[i] + dtau * u1x[i]).collect();
            let dy: Vec<f64> = (0..p).map(|i| u2y[i] + dtau * u1y[i]).collect();
            let dz: Vec<f64> = (0..m).map(|i| u2z[i] + dtau * u1z[i]).collect();
            // ds = W(lambda \ d_s) - W W dz
            let mut wdz = vec![0.0; m];
            apply_scaling(&program.cones, &scal, &dz, &mut wdz, false);
            let mut wwdz = vec![0.0; m];
            apply_scaling(&program.cones, &scal, &wdz, &mut wwdz, false);
            let ds: Vec<f64> = (0..m).map(|i| w_lam_inv_d[i] - wwdz[i]).collect();
            let dkappa = (dkt - kappa * dtau) / tau;
            (dx, dy, dz, ds, dtau, dkappa)
        };

        // predictor (affine); step lengths are measured in the scaled space,
        // where s + a ds in K iff lambda + a W^{-1}ds in K
        let ds_aff_target: Vec<f64> = lam_lam.iter().map(|v| -v).collect();
        let (_, _, dz_a, ds_a, dtau_a, dkappa_a) =
            direction(&kkt, &ds_aff_target, -tau * kappa, 1.0);
        let mut winv_ds = vec![0.0; m];
        apply_scaling(&program.cones, &scal, &ds_a, &mut winv_ds, true);
        let mut wdz_a = vec![0.0; m];
        apply_scaling(&program.cones, &scal, &dz_a, &mut wdz_a, false);
        let alpha_aff = step_length(
            &program.cones,
            &lambda,
            &winv_ds,
            &wdz_a,
            tau,
            kappa,
            dtau_a,
            dkappa_a,
            1.0,
        )
        .min(1.0);
        let mu_aff = {
            let sz: f64 = (0..m)
                .map(|i| (lambda[i] + alpha_aff * winv_ds[i]) * (lambda[i] + alpha_aff * wdz_a[i]))
                .sum();
            let tk = (tau + alpha_aff * dtau_a) * (kappa + alpha_aff * dkappa_a);
            (sz + tk) / (nu + 1.0)
        };
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // corrector (combined) with Mehrotra second-order term
        let mut corr = vec![0.0; m];
        jordan_product(&program.cones, &winv_ds, &wdz_a, &mut corr);
        let ds_target: Vec<f64> = (0..m)
            .map(|i| -lam_lam[i] - corr[i] + sigma * mu * e[i])
            .collect();
        let dkt = -tau * kappa - dtau_a * dkappa_a + sigma * mu;
        let (dx, dy, dz, ds, dtau, dkappa) = direction(&kkt, &ds_target, dkt, 1.0 - sigma);
        let mut winv_ds_c = vec![0.0; m];
        apply_scaling(&program.cones, &scal, &ds, &mut winv_ds_c, true);
        let mut wdz_c = vec![0.0; m];
        apply_scaling(&program.cones, &scal, &dz, &mut wdz_c, false);
        let alpha = step_length(
            &program.cones,
            &lambda,
            &winv_ds_c,
            &wdz_c,
            tau,
            kappa,
            dtau,
            dkappa,
            settings.frac_to_boundary,
        )
        .min(1.0);
        if !alpha.is_finite() || alpha <= 1e-14 {
            break;
        }

        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for i in 0..p {
            y[i] += alpha * dy[i];
        }
        for i in 0..m {
            z[i] += alpha * dz[i];
            s[i] += alpha * ds[i];
        }
        tau += alpha * dtau;
        kappa += alpha * dkappa;
        if std::env::var_os("CONIC_TRACE").is_some() {
            eprintln!(
                "it {iter} mu {mu:.3e} sigma {sigma:.3e} a_aff {alpha_aff:.3e} a {alpha:.3e} \
                 pres {pres:.3e} dres {dres:.3e} gap {relgap:.3e} tau {tau:.3e} kap {kappa:.3e} \
                 smarg {:.3e} zmarg {:.3e}",
                membership_margin(&program.cones, &s),
                membership_margin(&program.cones, &z)
            );
        }
    }

    Ok(best.map(|(_, sol)| sol).unwrap_or_else(|| {
        make_solution(program, &x, &y, &z, &s, tau, SolveStatus::MaxIterations, 0)
    }))
}

/// Largest cone-feasible step for the scaled pair `(lambda + a w_ds,
/// lambda + a w_dz)` and the `tau`/`kappa` line, times `frac`.
#[allow(clippy::too_many_arguments)]
fn step_length(
    cone_list: &[crate::ConeSpec],
    lambda: &[f64],
    w_ds: &[f64],
    w_dz: &[f64],
    tau: f64,
    kappa: f64,
    dtau: f64,
    dkappa: f64,
    frac: f64,
) -> f64 {
    let mut alpha =
        step_to_boundary(cone_list, lambda, w_ds).min(step_to_boundary(cone_list, lambda, w_dz));
    if dtau < 0.0 {
        alpha = alpha.min(-tau / dtau);
    }
    if dkappa < 0.0 {
        alpha = alpha.min(-kappa / dkappa);
    }
    frac * alpha
}

fn solve_equality_only(program: &ConeProgram, kkt: &mut KktSystem) -> ConeSolution {
    // no cones: stationary point of c'x s.t. Ax = b via one KKT solve
    kkt.factor(program, &[]);
    let neg_c: Vec<f64> = program.cost.iter().map(|v| -v).collect();
    let (x, y) = kkt.solve_reduced(&neg_c, &program.eq_rhs);
    let mut sol = make_solution(program, &x, &y, &[], &[], 1.0, SolveStatus::Optimal, 1);
    let mut ax = vec![0.0; program.eq_matrix.nrows()];
    program.eq_matrix.mul_vec(&x, &mut ax);
    let pres: f64 = ax
        .iter()
        .zip(&program.eq_rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    sol.primal_residual = pres;
    sol
}

fn make_solution(
    program: &ConeProgram,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    s: &[f64],
    tau: f64,
    status: SolveStatus,
    iterations: usize,
) -> ConeSolution {
    let scale = if status == SolveStatus::Optimal || status == SolveStatus::MaxIterations {
        1.0 / tau
    } else {
        1.0
    };
    let primal: Vec<f64> = x.iter().map(|v| v * scale).collect();
    let eq_dual: Vec<f64> = y.iter().map(|v| v * scale).collect();
    let cone_dual: Vec<f64> = z.iter().map(|v| v * scale).collect();
    let slack: Vec<f64> = s.iter().map(|v| v * scale).collect();
    let objective = dot(&program.cost, &primal);
    let gap = dot(&slack, &cone_dual);

    let p = program.eq_matrix.nrows();
    let m = program.ineq_matrix.nrows();
    let mut ares = vec![0.0; p];
    program.eq_matrix.mul_vec(&primal, &mut ares);
    for i in 0..p {
        ares[i] -= program.eq_rhs[i];
    }
    let mut gres = vec![0.0; m];
    program.ineq_matrix.mul_vec(&primal, &mut gres);
    for i in 0..m {
        gres[i] += slack[i] - program.ineq_rhs[i];
    }
    let primal_residual = norm_inf(&ares).max(norm_inf(&gres));
    let mut dres = program.cost.clone();
    program.eq_matrix.mul_transpose_add(&eq_dual, &mut dres);
    program.ineq_matrix.mul_transpose_add(&cone_dual, &mut dres);
    ConeSolution {
        status,
        primal,
        eq_dual,
        cone_dual,
        slack,
        objective,
        gap,
        primal_residual,
        dual_residual: norm_inf(&dres),
        iterations,
    }
}
