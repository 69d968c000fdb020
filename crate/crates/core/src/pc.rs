//! Predictor-corrector splitting of the projected chance-constrained problem.
//!
//! The full gPC program carries every tightened half-space as a second-order
//! cone over the stacked coefficients. The splitting here trades that for two
//! cheaper passes: a *predictor* propagates the expansion under the current
//! controls and freezes, per step and half-space normal `a`, the directional
//! variance `b_c = a' Sigma_x a` evaluated in cone form; the *corrector* then
//! solves an SCP over mean variables only, where each half-space becomes an
//! ordinary linear row with the root `kappa sqrt(b_c + extra)` folded into a
//! constant offset. Subproblems shrink from `d_x (l + 1) + d_u` to
//! `d_x + d_u` variables per step and contain no cone rows from constraints;
//! the price is that covariance costs and variance-trace constraints (which
//! have no image in mean variables) are dropped from the corrector.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::basis::{build_basis, gauss_hermite, BasisError};
use crate::constraints::{
    det_obstacle_halfspace, terminal_constraints, tightening, ConstraintError,
};
use crate::projection::{
    project_dynamics, propagate_gpc, GpcState, ProjectedDynamics, ProjectionError,
};
use crate::scp::{
    nominal_from_controls, solve_scp, PathRow, ScpConfig, ScpError, ScpIterRecord, ScpProblem,
    ScpStatus,
};

#[derive(Debug, Error)]
pub enum PcError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Scp(#[from] ScpError),
}

/// Frozen directional variances `values[k][j] = a_j' Sigma_{x_k} a_j`, one
/// entry per propagated state and half-space row supplied to [`predict`].
#[derive(Debug, Clone, Serialize)]
pub struct CorrectionTerm {
    pub values: Vec<Vec<f64>>,
}

impl CorrectionTerm {
    /// Largest frozen variance, handy for logging.
    pub fn max(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(*v))
    }
}

/// Propagates the expansion under `controls` and evaluates, for every state
/// `k` and half-space normal `a` in `rows[k]` (physical coordinates, length
/// `d_x`), the cone term
///
/// `b_c = sum_{j >= 1} <phi_j^2> (sum_i a_i x_ij)^2`,
///
/// which equals the directional variance `a' Sigma a` of the expansion.
/// `rows` must hold one (possibly empty) set of normals per state, i.e.
/// `controls.len() + 1` sets.
pub fn predict(
    pd: &ProjectedDynamics,
    x0: &GpcState,
    controls: &[DVector<f64>],
    dt: f64,
    rows: &[Vec<DVector<f64>>],
) -> Result<(Vec<GpcState>, CorrectionTerm), PcError> {
    let states = propagate_gpc(pd, x0, controls, dt)?;
    if rows.len() != states.len() {
        return Err(PcError::DimensionMismatch {
            what: "half-space row sets",
            expected: states.len(),
            got: rows.len(),
        });
    }
    let d_x = pd.model.d_x;
    let l = pd.basis.len();
    let mut values = Vec::with_capacity(states.len());
    for (x, step_rows) in states.iter().zip(rows) {
        let mut per_row = Vec::with_capacity(step_rows.len());
        for a in step_rows {
            if a.len() != d_x {
                return Err(PcError::DimensionMismatch {
                    what: "half-space normal length",
                    expected: d_x,
                    got: a.len(),
                });
            }
            let mut bc = 0.0;
            for j in 1..l {
                let dir: f64 = (0..d_x).map(|i| a[i] * x.coeffs[i * l + j]).sum();
                bc += pd.basis.norms_sq[j] * dir * dir;
            }
            per_row.push(bc);
        }
        values.push(per_row);
    }
    Ok((states, CorrectionTerm { values }))
}

/// Right-hand side of a corrected mean row: the half-space `a'x + b <= 0`
/// held with risk `eps` becomes `a' mu <= -b - kappa sqrt(b_c + extra_var)`
/// once the directional variance is frozen.
pub fn corrected_rhs(b: f64, kappa: f64, b_c: f64, extra_var: f64) -> f64 {
    -b - kappa * (b_c + extra_var).sqrt()
}

/// Order-zero re-projection of the same model: a single basis term, so the
/// stacked state is the mean and the projected step is exactly the nominal
/// ODE step (one quadrature node suffices because the realization is
/// constant across nodes).
pub fn mean_dynamics(pd: &ProjectedDynamics) -> Result<Arc<ProjectedDynamics>, PcError> {
    let dim = pd.basis.dim;
    let basis = Arc::new(build_basis(dim, 0)?);
    let rule = Arc::new(gauss_hermite(1, dim)?);
    Ok(Arc::new(project_dynamics(pd.model.clone(), basis, rule, pd.germ_map.clone())?))
}

/// The `j = 0` block of a stacked gPC cost matrix, i.e. the cost seen by the
/// mean coefficients alone.
fn mean_cost_block(q: &DMatrix<f64>, d_x: usize, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d_x, d_x, |i, ip| q[(i * l, ip * l)])
}

fn check_obstacle_dims(prob: &ScpProblem) -> Result<(), PcError> {
    for obs in &prob.obstacles {
        if obs.center_mean.len() != prob.pos_idx.len() {
            return Err(PcError::DimensionMismatch {
                what: "obstacle center dimension",
                expected: prob.pos_idx.len(),
                got: obs.center_mean.len(),
            });
        }
    }
    Ok(())
}

/// Half-space normals (lifted to full state coordinates) for every obstacle,
/// linearized at the supplied per-step means. Step 0 carries no rows: the
/// initial state is pinned.
fn halfspace_rows(
    prob: &ScpProblem,
    means: &[DVector<f64>],
) -> Result<Vec<Vec<DVector<f64>>>, PcError> {
    let d_x = prob.dynamics.model.d_x;
    let mut rows = vec![Vec::new(); means.len()];
    if prob.obstacles.is_empty() {
        return Ok(rows);
    }
    check_obstacle_dims(prob)?;
    for (k, mean) in means.iter().enumerate().skip(1) {
        for obs in &prob.obstacles {
            let pos = DVector::from_iterator(
                prob.pos_idx.len(),
                prob.pos_idx.iter().map(|&i| mean[i]),
            );
            let (a_pos, _) = det_obstacle_halfspace(&pos, obs, prob.r_rob)?;
            let mut a = DVector::zeros(d_x);
            for (i, &c) in prob.pos_idx.iter().enumerate() {
                a[c] = a_pos[i];
            }
            rows[k].push(a);
        }
    }
    Ok(rows)
}

/// Assembles the mean-variable corrector for `prob` around the per-step means
/// used by the predictor, with frozen correction terms `bc` (indexed like the
/// output of [`predict`] over the same obstacle order). Obstacles become
/// per-step linear rows with [`corrected_rhs`] offsets; no cone rows are
/// generated from constraints. Terminal mean rows survive; variance-trace
/// content is dropped. With `soft_weight` set the rows are relaxed through
/// priced slacks (risk-as-variable mode).
pub fn build_correction_problem(
    prob: &ScpProblem,
    mean_pd: Arc<ProjectedDynamics>,
    means: &[DVector<f64>],
    bc: &CorrectionTerm,
    soft_weight: Option<f64>,
) -> Result<ScpProblem, PcError> {
    let d_x = prob.dynamics.model.d_x;
    let l = prob.dynamics.basis.len();
    if means.len() != prob.horizon {
        return Err(PcError::DimensionMismatch {
            what: "linearization mean count",
            expected: prob.horizon,
            got: means.len(),
        });
    }
    if bc.values.len() != prob.horizon {
        return Err(PcError::DimensionMismatch {
            what: "correction term count",
            expected: prob.horizon,
            got: bc.values.len(),
        });
    }
    check_obstacle_dims(prob)?;

    let x0 = GpcState::new(d_x, prob.x0.mean())?;
    let mut mean_prob = ScpProblem::new(mean_pd, prob.horizon, prob.dt, x0)?;
    mean_prob.control_norm = prob.control_norm;
    mean_prob.control_weight = prob.control_weight;
    mean_prob.q_gpc = prob.q_gpc.as_ref().map(|q| mean_cost_block(q, d_x, l));
    mean_prob.q_gpc_f = prob.q_gpc_f.as_ref().map(|q| mean_cost_block(q, d_x, l));
    mean_prob.eps_col = prob.eps_col;
    mean_prob.r_rob = prob.r_rob;
    mean_prob.pos_idx = prob.pos_idx.clone();
    mean_prob.bound = prob.bound;
    if let Some(term) = &prob.terminal {
        // The correction pass plans means only, so the terminal mean is always
        // pinned here even when the source problem budgets it softly.
        let basis = mean_prob.dynamics.basis.clone();
        mean_prob.terminal = Some(terminal_constraints(
            &term.xf_mean,
            &DMatrix::zeros(d_x, d_x),
            term.variance.c,
            term.variance.eps,
            &basis,
        )?);
    }

    let kappa = tightening(prob.eps_col, prob.bound)?;
    for k in 1..prob.horizon {
        if !prob.obstacles.is_empty() && bc.values[k].len() != prob.obstacles.len() {
            return Err(PcError::DimensionMismatch {
                what: "correction terms per step",
                expected: prob.obstacles.len(),
                got: bc.values[k].len(),
            });
        }
        for (j, obs) in prob.obstacles.iter().enumerate() {
            let pos = DVector::from_iterator(
                prob.pos_idx.len(),
                prob.pos_idx.iter().map(|&i| means[k][i]),
            );
            let (a_pos, b) = det_obstacle_halfspace(&pos, obs, prob.r_rob)?;
            let mut extra = (&obs.center_cov * &a_pos).dot(&a_pos);
            if let Some(sxp) = &prob.cross_cov {
                extra += 2.0 * (sxp * &a_pos).dot(&a_pos);
            }
            let mut row = DVector::zeros(d_x);
            for (i, &c) in prob.pos_idx.iter().enumerate() {
                row[c] = a_pos[i];
            }
            mean_prob.lin_path.push(PathRow {
                step: k,
                row,
                rhs: corrected_rhs(b, kappa, bc.values[k][j], extra.max(0.0)),
                soft_weight,
            });
        }
    }
    Ok(mean_prob)
}

#[derive(Debug, Clone, Serialize)]
pub struct PcConfig {
    /// Settings for the inner mean-variable SCP.
    pub scp: ScpConfig,
    pub max_outer: usize,
    /// Outer convergence: largest position change of the corrected mean
    /// between successive corrections.
    pub conv_tol_pos: f64,
    /// Relax the tightened rows through priced slacks instead of enforcing
    /// them exactly.
    pub risk_as_variable: bool,
    /// Price per unit of row violation when `risk_as_variable` is on.
    pub slack_weight: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        PcConfig {
            scp: ScpConfig::default(),
            max_outer: 12,
            conv_tol_pos: 1e-3,
            risk_as_variable: false,
            slack_weight: 1e3,
        }
    }
}

/// One outer predict-correct round; `inner` carries the embedded SCP log.
#[derive(Debug, Clone, Serialize)]
pub struct PcIterRecord {
    pub outer: usize,
    /// `max_k || pos(mu_i[k]) - pos(mu_{i-1}[k]) ||_2` after the correction.
    pub mean_change: f64,
    /// Largest frozen variance fed into this correction.
    pub max_correction: f64,
    pub inner_status: ScpStatus,
    pub inner: Vec<ScpIterRecord>,
}

/// Output of [`solve_pc`]. `mean_trajectory` is the corrector's iterate;
/// `gpc_trajectory` and `correction` come from a final predictor pass under
/// the returned controls, so they are mutually consistent.
#[derive(Debug, Clone)]
pub struct PcResult {
    pub mean_trajectory: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub gpc_trajectory: Vec<GpcState>,
    pub correction: CorrectionTerm,
    pub outer_log: Vec<PcIterRecord>,
    pub status: ScpStatus,
}

/// Alternates predictor and corrector passes from `initial_controls` until
/// the corrected mean stops moving (`mean_change <= conv_tol_pos`), the outer
/// budget runs out, or a corrector reports infeasibility (which is passed
/// through as a status, with the last iterate kept for diagnosis).
pub fn solve_pc(
    prob: &ScpProblem,
    initial_controls: Vec<DVector<f64>>,
    cfg: &PcConfig,
) -> Result<PcResult, PcError> {
    if initial_controls.len() != prob.horizon - 1 {
        return Err(PcError::DimensionMismatch {
            what: "initial control count",
            expected: prob.horizon - 1,
            got: initial_controls.len(),
        });
    }
    let mean_pd = mean_dynamics(&prob.dynamics)?;
    let soft = if cfg.risk_as_variable { Some(cfg.slack_weight) } else { None };
    let pos_of = |m: &DVector<f64>| -> DVector<f64> {
        if prob.pos_idx.is_empty() {
            m.clone()
        } else {
            DVector::from_iterator(prob.pos_idx.len(), prob.pos_idx.iter().map(|&i| m[i]))
        }
    };

    let mut controls = initial_controls;
    let seed_states = propagate_gpc(&prob.dynamics, &prob.x0, &controls, prob.dt)?;
    let mut means: Vec<DVector<f64>> = seed_states.iter().map(GpcState::mean).collect();
    let mut outer_log = Vec::new();
    let mut status = ScpStatus::MaxIterations;
    let mut gpc_final = seed_states;
    let mut corr_final = CorrectionTerm { values: vec![Vec::new(); prob.horizon] };

    for outer in 1..=cfg.max_outer {
        // Predictor: freeze the directional variances along rows linearized
        // at the latest corrected mean.
        let rows = halfspace_rows(prob, &means)?;
        let (gpc_states, bc) = predict(&prob.dynamics, &prob.x0, &controls, prob.dt, &rows)?;
        // Corrector: mean-only SCP with the frozen roots in the offsets.
        let mean_prob = build_correction_problem(prob, mean_pd.clone(), &means, &bc, soft)?;
        let initial = nominal_from_controls(&mean_prob, controls.clone())?;
        let inner = solve_scp(&mean_prob, initial, &cfg.scp)?;
        let inner_status = inner.status;
        gpc_final = gpc_states;
        let max_correction = bc.max();
        corr_final = bc;
        if inner_status == ScpStatus::Infeasible {
            outer_log.push(PcIterRecord {
                outer,
                mean_change: f64::INFINITY,
                max_correction,
                inner_status,
                inner: inner.iteration_log,
            });
            status = ScpStatus::Infeasible;
            break;
        }
        let new_means: Vec<DVector<f64>> =
            inner.gpc_trajectory.iter().map(GpcState::mean).collect();
        let change = means
            .iter()
            .zip(&new_means)
            .map(|(old, new)| (pos_of(new) - pos_of(old)).norm())
            .fold(0.0_f64, f64::max);
        controls = inner.controls;
        means = new_means;
        outer_log.push(PcIterRecord {
            outer,
            mean_change: change,
            max_correction,
            inner_status,
            inner: inner.iteration_log,
        });
        if change <= cfg.conv_tol_pos {
            status = ScpStatus::Converged;
            break;
        }
    }

    if status != ScpStatus::Infeasible {
        // Re-run the predictor at the returned controls so the reported
        // expansion and correction terms match them.
        let rows = halfspace_rows(prob, &means)?;
        let (g, c) = predict(&prob.dynamics, &prob.x0, &controls, prob.dt, &rows)?;
        gpc_final = g;
        corr_final = c;
    }
    Ok(PcResult {
        mean_trajectory: means,
        controls,
        gpc_trajectory: gpc_final,
        correction: corr_final,
        outer_log,
        status,
    })
}
