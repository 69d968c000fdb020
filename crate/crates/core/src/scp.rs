//! Trust-region sequential convex programming over the projected dynamics.
//!
//! Each iteration linearizes the projected system around the current nominal,
//! re-linearizes the obstacle half-spaces at the nominal means, assembles a
//! second-order cone program (dynamics equalities, tightened collision cones,
//! quadratic trust regions, control box, terminal set with slack-relaxed
//! variance), and accepts the subproblem optimum as the next nominal. Radii
//! shrink geometrically; infeasible subproblems expand them and retry.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    det_obstacle_halfspace, to_gpc_soc_with, ConstraintError, GpcQuadratic, LinearChance,
    Obstacle, SocGpcConstraint, TerminalSpec, TighteningBound,
};
use crate::projection::{
    linearize_projected, propagate_gpc, GpcState, ProjectedDynamics, ProjectionError,
};
use gpcscp_conic::{solve, ConeProgram, ConicError, ProgramBuilder, SolveStatus};

/// Coefficients below this magnitude are dropped from sparse rows.
const SPARSE_EPS: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ScpError {
    #[error("horizon must span at least two states, got {0}")]
    HorizonTooShort(usize),
    #[error("time step must be positive, got {0}")]
    NonPositiveTimestep(f64),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("gPC cost matrix must be positive semidefinite")]
    IndefiniteCost,
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solver(#[from] ConicError),
}

/// Norm order of the control-effort term in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ControlNorm {
    L1,
    L2,
    Linf,
}

/// Trust-region schedule and termination knobs.
///
/// `alpha_x` / `alpha_u` are the squared initial radii; iteration `i` uses
/// radius `sqrt(alpha beta^i)`. When a subproblem comes back infeasible the
/// radii are multiplied by `expand_factor` and the iteration retried, up to
/// `retry_budget` attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScpConfig {
    pub alpha_x: f64,
    pub alpha_u: f64,
    pub beta: f64,
    pub expand_factor: f64,
    pub max_iter: usize,
    pub conv_tol: f64,
    pub terminal_slack_weight: f64,
    pub retry_budget: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for ScpConfig {
    fn default() -> Self {
        ScpConfig {
            alpha_x: 10.0,
            alpha_u: 2.0,
            beta: 0.9,
            expand_factor: 1.5,
            max_iter: 30,
            conv_tol: 1e-4,
            terminal_slack_weight: 1e4,
            retry_budget: 5,
            solver_tol: 1e-8,
            solver_max_iter: 100,
        }
    }
}

/// Extra linear constraint `row . X[step] <= rhs` on the stacked gPC state.
///
/// With `soft_weight = Some(w)` the row is relaxed through a nonnegative
/// violation slack priced at `w` in the objective instead of being enforced
/// exactly.
#[derive(Debug, Clone)]
pub struct PathRow {
    pub step: usize,
    pub row: DVector<f64>,
    pub rhs: f64,
    pub soft_weight: Option<f64>,
}

/// One convexified planning instance over a fixed horizon.
///
/// `horizon` counts states (>= 2); controls span `horizon - 1` steps. Costs:
/// `control_weight * dt * ||u_k||_p` per step, plus optional gPC-space
/// quadratic state costs `q_gpc` (per step, weighted by `dt`) and `q_gpc_f`
/// (terminal). Obstacles are checked on the `pos_idx` components of the mean
/// and re-linearized at every SCP iteration.
pub struct ScpProblem {
    pub dynamics: Arc<ProjectedDynamics>,
    pub horizon: usize,
    pub dt: f64,
    pub x0: GpcState,
    pub q_gpc: Option<DMatrix<f64>>,
    pub q_gpc_f: Option<DMatrix<f64>>,
    pub control_norm: ControlNorm,
    pub control_weight: f64,
    pub obstacles: Vec<Obstacle>,
    pub eps_col: f64,
    pub r_rob: f64,
    pub pos_idx: Vec<usize>,
    /// Robot-obstacle cross covariance over `pos_idx`, added to the constant
    /// variance under the tightening root.
    pub cross_cov: Option<DMatrix<f64>>,
    pub quad_constraints: Vec<GpcQuadratic>,
    /// Fixed linear rows on the stacked state, e.g. tightened half-spaces
    /// precomputed by a predictor pass.
    pub lin_path: Vec<PathRow>,
    pub terminal: Option<TerminalSpec>,
    pub bound: TighteningBound,
}

impl ScpProblem {
    /// Obstacle-free minimum-effort problem; push constraints into the public
    /// fields afterwards.
    pub fn new(
        dynamics: Arc<ProjectedDynamics>,
        horizon: usize,
        dt: f64,
        x0: GpcState,
    ) -> Result<ScpProblem, ScpError> {
        if horizon < 2 {
            return Err(ScpError::HorizonTooShort(horizon));
        }
        if !(dt > 0.0) {
            return Err(ScpError::NonPositiveTimestep(dt));
        }
        let n_x = dynamics.model.d_x * dynamics.basis.len();
        if x0.coeffs.len() != n_x {
            return Err(ScpError::DimensionMismatch {
                what: "initial gPC state length",
                expected: n_x,
                got: x0.coeffs.len(),
            });
        }
        Ok(ScpProblem {
            dynamics,
            horizon,
            dt,
            x0,
            q_gpc: None,
            q_gpc_f: None,
            control_norm: ControlNorm::L2,
            control_weight: 1.0,
            obstacles: Vec::new(),
            eps_col: 0.05,
            r_rob: 0.0,
            pos_idx: Vec::new(),
            cross_cov: None,
            quad_constraints: Vec::new(),
            lin_path: Vec::new(),
            terminal: None,
            bound: TighteningBound::DistributionallyRobust,
        })
    }

    /// Stacked gPC state dimension `d_x (l + 1)`.
    pub fn n_x(&self) -> usize {
        self.dynamics.model.d_x * self.dynamics.basis.len()
    }
}

/// Linearization point: `horizon` states and `horizon - 1` controls.
#[derive(Debug, Clone)]
pub struct Nominal {
    pub states: Vec<GpcState>,
    pub controls: Vec<DVector<f64>>,
}

impl Nominal {
    fn check(&self, prob: &ScpProblem) -> Result<(), ScpError> {
        if self.states.len() != prob.horizon {
            return Err(ScpError::DimensionMismatch {
                what: "nominal state count",
                expected: prob.horizon,
                got: self.states.len(),
            });
        }
        if self.controls.len() != prob.horizon - 1 {
            return Err(ScpError::DimensionMismatch {
                what: "nominal control count",
                expected: prob.horizon - 1,
                got: self.controls.len(),
            });
        }
        Ok(())
    }
}

/// Propagates `controls` through the projected dynamics to get a dynamically
/// consistent nominal.
pub fn nominal_from_controls(
    prob: &ScpProblem,
    controls: Vec<DVector<f64>>,
) -> Result<Nominal, ScpError> {
    if controls.len() != prob.horizon - 1 {
        return Err(ScpError::DimensionMismatch {
            what: "control count",
            expected: prob.horizon - 1,
            got: controls.len(),
        });
    }
    let states = propagate_gpc(&prob.dynamics, &prob.x0, &controls, prob.dt)?;
    Ok(Nominal { states, controls })
}

/// Variable layout of an assembled subproblem: states first (step-major),
/// then controls, then cost/slack extras.
#[derive(Debug, Clone)]
pub struct SubproblemLayout {
    pub n_x: usize,
    pub d_u: usize,
    pub horizon: usize,
    pub u_base: usize,
    pub terminal_slack: Option<usize>,
}

impl SubproblemLayout {
    pub fn x_index(&self, k: usize, c: usize) -> usize {
        debug_assert!(k < self.horizon && c < self.n_x);
        k * self.n_x + c
    }

    pub fn u_index(&self, k: usize, c: usize) -> usize {
        debug_assert!(k + 1 < self.horizon && c < self.d_u);
        self.u_base + k * self.d_u + c
    }
}

/// Appends `sum_i (row_i . z - shift_i)^2 <= bound_const + bound_row . z` as
/// the rotated-cone identity `||(2 q, 1 - y)|| <= 1 + y`.
fn add_quad_cone(
    b: &mut ProgramBuilder,
    quad_rows: Vec<(Vec<(usize, f64)>, f64)>,
    bound_row: Vec<(usize, f64)>,
    bound_const: f64,
) {
    let mut rows = Vec::with_capacity(quad_rows.len() + 2);
    let neg: Vec<(usize, f64)> = bound_row.iter().map(|&(c, v)| (c, -v)).collect();
    rows.push((neg, 1.0 + bound_const));
    for (r, shift) in quad_rows {
        rows.push((r.into_iter().map(|(c, v)| (c, -2.0 * v)).collect(), -2.0 * shift));
    }
    rows.push((bound_row, 1.0 - bound_const));
    b.add_soc(rows);
}

/// Rows `sqrt(lambda_i) v_i'` of a PSD factorization `Q = F' F`, dropping
/// directions below `1e-12 lambda_max`.
fn psd_factor_rows(q: &DMatrix<f64>) -> Result<Vec<DVector<f64>>, ScpError> {
    let eig = nalgebra::SymmetricEigen::new(q.clone());
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |acc, l| acc.max(*l));
    let mut rows = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-9 * (1.0 + lam_max) {
            return Err(ScpError::IndefiniteCost);
        }
        if lam > 1e-12 * (1.0 + lam_max) {
            rows.push(eig.eigenvectors.column(i).scale(lam.sqrt()).into_owned());
        }
    }
    Ok(rows)
}

fn quad_cost_rows(
    layout: &SubproblemLayout,
    factor: &[DVector<f64>],
    k: usize,
) -> Vec<(Vec<(usize, f64)>, f64)> {
    factor
        .iter()
        .map(|f| {
            let row = f
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > SPARSE_EPS)
                .map(|(c, &v)| (layout.x_index(k, c), v))
                .collect();
            (row, 0.0)
        })
        .collect()
}

/// Tightened collision cone for one obstacle at one nominal mean. The robot
/// variance along the half-space normal comes from the gPC cone rows; the
/// obstacle (and cross) covariance enters as the constant `extra_var`.
fn obstacle_cone(
    prob: &ScpProblem,
    mean: &DVector<f64>,
    obs: &Obstacle,
) -> Result<(SocGpcConstraint, f64), ScpError> {
    let pos = DVector::from_iterator(prob.pos_idx.len(), prob.pos_idx.iter().map(|&i| mean[i]));
    let (a_pos, b) = det_obstacle_halfspace(&pos, obs, prob.r_rob)?;
    let mut extra_var = (&obs.center_cov * &a_pos).dot(&a_pos);
    if let Some(sxp) = &prob.cross_cov {
        extra_var += 2.0 * (sxp * &a_pos).dot(&a_pos);
    }
    let mut a_full = DVector::zeros(prob.dynamics.model.d_x);
    for (i, &c) in prob.pos_idx.iter().enumerate() {
        a_full[c] = a_pos[i];
    }
    let lc = LinearChance::new(a_full, b, prob.eps_col)?;
    Ok((to_gpc_soc_with(&lc, &prob.dynamics.basis, prob.bound)?, extra_var.max(0.0)))
}

/// Margin of a tightened collision cone with a constant extra variance term.
pub fn cone_margin(soc: &SocGpcConstraint, extra_var: f64, x: &GpcState) -> f64 {
    let dir = (&soc.cone_matrix * &x.coeffs).norm_squared();
    soc.lin_row.dot(&x.coeffs) + soc.offset + soc.scale * (dir + extra_var).sqrt()
}

/// Worst tightened collision margin per step, each cone re-linearized at the
/// step's own mean — a nonpositive entry certifies the nonlinear tightened
/// constraint there. `NEG_INFINITY` entries mean no obstacles.
pub fn collision_margins(prob: &ScpProblem, states: &[GpcState]) -> Result<Vec<f64>, ScpError> {
    states
        .iter()
        .map(|x| {
            let mean = x.mean();
            let mut worst = f64::NEG_INFINITY;
            for obs in &prob.obstacles {
                let (soc, extra) = obstacle_cone(prob, &mean, obs)?;
                worst = worst.max(cone_margin(&soc, extra, x));
            }
            Ok(worst)
        })
        .collect()
}

/// Assembles the convex subproblem at `nominal` with trust radii
/// `trust = (rx, ru)`; a zero radius pins the corresponding variables to the
/// nominal with equality rows. `slack_weight` prices the terminal-variance
/// slack.
pub fn build_subproblem(
    prob: &ScpProblem,
    nominal: &Nominal,
    trust: (f64, f64),
    slack_weight: f64,
) -> Result<(ConeProgram, SubproblemLayout), ScpError> {
    nominal.check(prob)?;
    if !prob.obstacles.is_empty() {
        for obs in &prob.obstacles {
            if obs.center_mean.len() != prob.pos_idx.len() {
                return Err(ScpError::DimensionMismatch {
                    what: "obstacle center dimension",
                    expected: prob.pos_idx.len(),
                    got: obs.center_mean.len(),
                });
            }
        }
    }
    let model = &prob.dynamics.model;
    let l = prob.dynamics.basis.len();
    let n_x = prob.n_x();
    let d_u = model.d_u;
    let s = prob.horizon;
    let (rx, ru) = trust;

    let mut b = ProgramBuilder::new();
    b.add_vars(s * n_x);
    let u_base = b.add_vars((s - 1) * d_u);
    let mut layout =
        SubproblemLayout { n_x, d_u, horizon: s, u_base, terminal_slack: None };

    // Initial state and linearized dynamics equalities.
    for c in 0..n_x {
        b.add_eq(vec![(layout.x_index(0, c), 1.0)], prob.x0.coeffs[c]);
    }
    for k in 0..s - 1 {
        let (a, bm, z) = linearize_projected(&prob.dynamics, &nominal.states[k], &nominal.controls[k], prob.dt);
        for r in 0..n_x {
            let mut row = Vec::with_capacity(n_x + d_u + 1);
            row.push((layout.x_index(k + 1, r), 1.0));
            for c in 0..n_x {
                let mut coeff = -a[(r, c)];
                if r == c {
                    coeff -= 1.0;
                }
                if coeff.abs() > SPARSE_EPS {
                    row.push((layout.x_index(k, c), coeff));
                }
            }
            for j in 0..d_u {
                let v = -bm[(r, j)];
                if v.abs() > SPARSE_EPS {
                    row.push((layout.u_index(k, j), v));
                }
            }
            b.add_eq(row, z[r]);
        }
    }

    // Control box (finite bounds only).
    for k in 0..s - 1 {
        for j in 0..d_u {
            let up = model.control_upper[j];
            if up.is_finite() {
                b.add_ineq(vec![(layout.u_index(k, j), 1.0)], up);
            }
            let lo = model.control_lower[j];
            if lo.is_finite() {
                b.add_ineq(vec![(layout.u_index(k, j), -1.0)], -lo);
            }
        }
    }

    // Fixed linear path rows; soft rows buy violation through a priced slack.
    for pr in &prob.lin_path {
        if pr.step >= s {
            return Err(ScpError::DimensionMismatch {
                what: "path row step",
                expected: s - 1,
                got: pr.step,
            });
        }
        if pr.row.len() != n_x {
            return Err(ScpError::DimensionMismatch {
                what: "path row length",
                expected: n_x,
                got: pr.row.len(),
            });
        }
        let mut row: Vec<(usize, f64)> = pr
            .row
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > SPARSE_EPS)
            .map(|(c, &v)| (layout.x_index(pr.step, c), v))
            .collect();
        if let Some(w) = pr.soft_weight {
            let slack = b.add_vars(1);
            b.add_cost(slack, w);
            b.add_ineq(vec![(slack, -1.0)], 0.0);
            row.push((slack, -1.0));
        }
        b.add_ineq(row, pr.rhs);
    }

    // Trust regions around the nominal; radius zero degenerates to equality.
    for k in 1..s {
        if rx > 0.0 {
            let mut rows = Vec::with_capacity(n_x + 1);
            rows.push((Vec::new(), rx));
            for c in 0..n_x {
                rows.push((vec![(layout.x_index(k, c), 1.0)], nominal.states[k].coeffs[c]));
            }
            b.add_soc(rows);
        } else {
            for c in 0..n_x {
                b.add_eq(vec![(layout.x_index(k, c), 1.0)], nominal.states[k].coeffs[c]);
            }
        }
    }
    for k in 0..s - 1 {
        if ru > 0.0 {
            let mut rows = Vec::with_capacity(d_u + 1);
            rows.push((Vec::new(), ru));
            for j in 0..d_u {
                rows.push((vec![(layout.u_index(k, j), 1.0)], nominal.controls[k][j]));
            }
            b.add_soc(rows);
        } else {
            for j in 0..d_u {
                b.add_eq(vec![(layout.u_index(k, j), 1.0)], nominal.controls[k][j]);
            }
        }
    }

    // Collision cones re-linearized at the nominal means (initial state is
    // pinned, so step 0 is skipped).
    for k in 1..s {
        let mean = nominal.states[k].mean();
        for obs in &prob.obstacles {
            let (soc, extra_var) = obstacle_cone(prob, &mean, obs)?;
            let mut rows = Vec::with_capacity(l + 2);
            let mut head = Vec::new();
            for (c, v) in soc.lin_row.iter().enumerate() {
                if v.abs() > SPARSE_EPS {
                    head.push((layout.x_index(k, c), v / soc.scale));
                }
            }
            rows.push((head, -soc.offset / soc.scale));
            for j in 0..soc.cone_matrix.nrows() {
                let row: Vec<(usize, f64)> = soc
                    .cone_matrix
                    .row(j)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > SPARSE_EPS)
                    .map(|(c, v)| (layout.x_index(k, c), -v))
                    .collect();
                if !row.is_empty() {
                    rows.push((row, 0.0));
                }
            }
            if extra_var > 0.0 {
                rows.push((Vec::new(), extra_var.sqrt()));
            }
            if rows.len() == 1 {
                // No stochastic modes and no constant variance: the cone
                // degenerates to its head half-space.
                let (head, rhs) = rows.pop().expect("head row");
                b.add_ineq(head, rhs);
            } else {
                b.add_soc(rows);
            }
        }
    }

    // Path quadratic chance constraints (gPC trace form) at every free step.
    for q in &prob.quad_constraints {
        if q.weights.len() != n_x {
            return Err(ScpError::DimensionMismatch {
                what: "quadratic constraint weights",
                expected: n_x,
                got: q.weights.len(),
            });
        }
        for k in 1..s {
            let rows: Vec<(Vec<(usize, f64)>, f64)> = q
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .map(|(c, &w)| (vec![(layout.x_index(k, c), w.sqrt())], 0.0))
                .collect();
            if !rows.is_empty() {
                add_quad_cone(&mut b, rows, Vec::new(), q.c * q.eps);
            }
        }
    }

    // Terminal set: with a pinned mean only the variance trace is budgeted;
    // otherwise the mean-offset rows join the same cone so the expected
    // quadratic shares the budget. Either way the cone carries a priced slack.
    if let Some(term) = &prob.terminal {
        if term.xf_mean.len() != model.d_x {
            return Err(ScpError::DimensionMismatch {
                what: "terminal mean length",
                expected: model.d_x,
                got: term.xf_mean.len(),
            });
        }
        if term.pin_mean {
            for (col, v) in term.mean_rows(l) {
                b.add_eq(vec![(layout.x_index(s - 1, col), 1.0)], v);
            }
        }
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        if !term.pin_mean {
            for (i, &q) in term.q_diag.iter().enumerate() {
                if q > 0.0 {
                    let w = q.sqrt();
                    rows.push((vec![(layout.x_index(s - 1, i * l), w)], w * term.xf_mean[i]));
                }
            }
        }
        rows.extend(
            term.variance
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w > 0.0)
                .map(|(c, &w)| (vec![(layout.x_index(s - 1, c), w.sqrt())], 0.0)),
        );
        if !rows.is_empty() {
            let slack = b.add_vars(1);
            b.add_cost(slack, slack_weight);
            b.add_ineq(vec![(slack, -1.0)], 0.0);
            add_quad_cone(&mut b, rows, vec![(slack, 1.0)], term.variance.c * term.variance.eps);
            layout.terminal_slack = Some(slack);
        }
    }

    // Control effort: integral of the chosen norm.
    let w = prob.control_weight * prob.dt;
    if w > 0.0 {
        match prob.control_norm {
            ControlNorm::L2 => {
                let factor: Vec<Vec<f64>> = (0..d_u)
                    .map(|r| {
                        let mut row = vec![0.0; d_u];
                        row[r] = w;
                        row
                    })
                    .collect();
                let shift = vec![0.0; d_u];
                for k in 0..s - 1 {
                    let vars: Vec<usize> = (0..d_u).map(|j| layout.u_index(k, j)).collect();
                    b.epigraph_soc(&factor, &vars, &shift);
                }
            }
            ControlNorm::L1 => {
                for k in 0..s - 1 {
                    for j in 0..d_u {
                        let abs = b.add_vars(1);
                        b.add_cost(abs, w);
                        b.add_ineq(vec![(layout.u_index(k, j), 1.0), (abs, -1.0)], 0.0);
                        b.add_ineq(vec![(layout.u_index(k, j), -1.0), (abs, -1.0)], 0.0);
                    }
                }
            }
            ControlNorm::Linf => {
                for k in 0..s - 1 {
                    let t = b.add_vars(1);
                    b.add_cost(t, w);
                    for j in 0..d_u {
                        b.add_ineq(vec![(layout.u_index(k, j), 1.0), (t, -1.0)], 0.0);
                        b.add_ineq(vec![(layout.u_index(k, j), -1.0), (t, -1.0)], 0.0);
                    }
                }
            }
        }
    }

    // Quadratic gPC state costs through rotated-cone epigraphs.
    if let Some(q) = &prob.q_gpc {
        if q.nrows() != n_x || q.ncols() != n_x {
            return Err(ScpError::DimensionMismatch {
                what: "q_gpc dimension",
                expected: n_x,
                got: q.nrows(),
            });
        }
        let factor = psd_factor_rows(q)?;
        if !factor.is_empty() {
            for k in 1..s {
                let rows = quad_cost_rows(&layout, &factor, k);
                let y = b.add_vars(1);
                b.add_cost(y, prob.dt);
                add_quad_cone(&mut b, rows, vec![(y, 1.0)], 0.0);
            }
        }
    }
    if let Some(qf) = &prob.q_gpc_f {
        if qf.nrows() != n_x || qf.ncols() != n_x {
            return Err(ScpError::DimensionMismatch {
                what: "q_gpc_f dimension",
                expected: n_x,
                got: qf.nrows(),
            });
        }
        let factor = psd_factor_rows(qf)?;
        if !factor.is_empty() {
            let rows = quad_cost_rows(&layout, &factor, s - 1);
            let y = b.add_vars(1);
            b.add_cost(y, 1.0);
            add_quad_cone(&mut b, rows, vec![(y, 1.0)], 0.0);
        }
    }

    Ok((b.build(), layout))
}

/// Per-iteration record of the outer loop.
#[derive(Debug, Clone, Serialize)]
pub struct ScpIterRecord {
    pub iteration: usize,
    pub cost: f64,
    pub radius_x: f64,
    pub radius_u: f64,
    /// `max_k ||X_i[k] - X_{i-1}[k]||_2`.
    pub step_change: f64,
    /// `max_k ||u_i[k] - u_{i-1}[k]||_2`.
    pub step_change_u: f64,
    pub solver_status: String,
    pub retries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScpStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

/// Output of [`solve_scp`]: the last accepted iterate (which satisfies its own
/// linearized dynamics to solver tolerance) plus the iteration log.
#[derive(Debug, Clone)]
pub struct ScpResult {
    pub gpc_trajectory: Vec<GpcState>,
    pub controls: Vec<DVector<f64>>,
    pub iteration_log: Vec<ScpIterRecord>,
    pub status: ScpStatus,
}

fn status_str(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Optimal => "optimal",
        SolveStatus::PrimalInfeasible => "primal_infeasible",
        SolveStatus::DualInfeasible => "dual_infeasible",
        SolveStatus::MaxIterations => "max_iterations",
    }
}

fn extract_nominal(primal: &[f64], layout: &SubproblemLayout, d_x: usize) -> Nominal {
    let states = (0..layout.horizon)
        .map(|k| {
            let start = layout.x_index(k, 0);
            GpcState {
                d_x,
                coeffs: DVector::from_iterator(layout.n_x, primal[start..start + layout.n_x].iter().copied()),
            }
        })
        .collect();
    let controls = (0..layout.horizon - 1)
        .map(|k| {
            let start = layout.u_index(k, 0);
            DVector::from_iterator(layout.d_u, primal[start..start + layout.d_u].iter().copied())
        })
        .collect();
    Nominal { states, controls }
}

/// Runs the outer SCP loop from `initial` until the iterate stops moving
/// (`step_change <= conv_tol`), the iteration budget runs out, or a subproblem
/// stays infeasible through the retry budget. Infeasibility is reported as a
/// status, with the last accepted nominal returned for diagnosis.
pub fn solve_scp(
    prob: &ScpProblem,
    initial: Nominal,
    cfg: &ScpConfig,
) -> Result<ScpResult, ScpError> {
    assert!(cfg.beta > 0.0 && cfg.beta < 1.0, "beta must lie in (0, 1)");
    assert!(cfg.expand_factor > 1.0, "expand_factor must exceed 1");
    initial.check(prob)?;

    let d_x = prob.dynamics.model.d_x;
    let mut nominal = initial;
    let mut log: Vec<ScpIterRecord> = Vec::new();
    // Persistent boost so a radius that had to grow for feasibility is not
    // immediately shrunk back below it.
    let mut boost = 1.0f64;

    for i in 1..=cfg.max_iter {
        let sched = cfg.beta.powi(i as i32);
        let mut rx = (cfg.alpha_x * sched).sqrt() * boost;
        let mut ru = (cfg.alpha_u * sched).sqrt() * boost;
        let mut retries = 0usize;
        let accepted = loop {
            let (program, layout) = build_subproblem(prob, &nominal, (rx, ru), cfg.terminal_slack_weight)?;
            let sol = solve(&program, cfg.solver_tol, cfg.solver_max_iter)?;
            if sol.status == SolveStatus::Optimal {
                break Some((sol, layout));
            }
            if retries >= cfg.retry_budget {
                break None;
            }
            retries += 1;
            rx *= cfg.expand_factor;
            ru *= cfg.expand_factor;
            boost *= cfg.expand_factor;
        };
        let Some((sol, layout)) = accepted else {
            return Ok(ScpResult {
                gpc_trajectory: nominal.states,
                controls: nominal.controls,
                iteration_log: log,
                status: ScpStatus::Infeasible,
            });
        };
        let next = extract_nominal(&sol.primal, &layout, d_x);
        let step_change = next
            .states
            .iter()
            .zip(&nominal.states)
            .map(|(a, b)| (&a.coeffs - &b.coeffs).norm())
            .fold(0.0f64, f64::max);
        let step_change_u = next
            .controls
            .iter()
            .zip(&nominal.controls)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        log.push(ScpIterRecord {
            iteration: i,
            cost: sol.objective,
            radius_x: rx,
            radius_u: ru,
            step_change,
            step_change_u,
            solver_status: status_str(sol.status).to_owned(),
            retries,
        });
        nominal = next;
        if step_change <= cfg.conv_tol {
            return Ok(ScpResult {
                gpc_trajectory: nominal.states,
                controls: nominal.controls,
                iteration_log: log,
                status: ScpStatus::Converged,
            });
        }
    }
    Ok(ScpResult {
        gpc_trajectory: nominal.states,
        controls: nominal.controls,
        iteration_log: log,
        status: ScpStatus::MaxIterations,
    })
}
