//! Interior-point solver for standard-form cone programs
//!
//! ```text
//!   minimize    cost' z
//!   subject to  eq_matrix z = eq_rhs
//!               G z + s = h,   s in K
//! ```
//!
//! with `K` an ordered product of nonnegative-orthant and second-order cone
//! blocks. The algorithm is a homogeneous self-dual embedding with
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector step, so primal
//! and dual infeasibility are detected through rays of the embedding rather
//! than by divergence. The KKT system is reduced to the (variables +
//! equalities) block and factored densely each iteration.

mod cones;
mod kkt;
mod solver;

use thiserror::Error;

pub use solver::SolverSettings;

/// One block of the slack cone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeSpec {
    /// Componentwise nonnegative slacks.
    Orthant(usize),
    /// `(s0, s1)` with `s0 >= ||s1||_2`; size counts the full block (>= 2).
    SecondOrder(usize),
}

impl ConeSpec {
    pub fn size(&self) -> usize {
        match self {
            ConeSpec::Orthant(n) | ConeSpec::SecondOrder(n) => *n,
        }
    }
}

/// Sparse row-major matrix; rows hold sorted-unique `(column, value)` pairs.
#[derive(Debug, Clone, Default)]
pub struct SparseMatrix {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn new(cols: usize) -> Self {
        SparseMatrix { cols, rows: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, mut entries: Vec<(usize, f64)>) {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by(|later, first| {
            if later.0 == first.0 {
                first.1 += later.1;
                true
            } else {
                false
            }
        });
        entries.retain(|e| e.1 != 0.0);
        self.rows.push(entries);
    }

    /// `out = self * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            out[r] = row.iter().map(|&(c, v)| v * x[c]).sum();
        }
    }

    /// `out += self' * x` (transpose apply, accumulating).
    pub fn mul_transpose_add(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let xr = x[r];
            if xr != 0.0 {
                for &(c, v) in row {
                    out[c] += v * xr;
                }
            }
        }
    }
}

/// Standard-form cone program.
#[derive(Debug, Clone)]
pub struct ConeProgram {
    pub n: usize,
    pub cost: Vec<f64>,
    pub eq_matrix: SparseMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq_matrix: SparseMatrix,
    pub ineq_rhs: Vec<f64>,
    pub cones: Vec<ConeSpec>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConicError {
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("cone block sizes sum to {cones} but G has {rows} rows")]
    ConeRowMismatch { cones: usize, rows: usize },
    #[error("second-order cone blocks need size >= 2, got {0}")]
    SocTooSmall(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl ConeProgram {
    pub fn validate(&self) -> Result<(), ConicError> {
        if self.cost.len() != self.n
            || self.eq_matrix.cols != self.n
            || self.ineq_matrix.cols != self.n
        {
            return Err(ConicError::Dimension(format!(
                "n={} cost={} eq_cols={} ineq_cols={}",
                self.n,
                self.cost.len(),
                self.eq_matrix.cols,
                self.ineq_matrix.cols
            )));
        }
        if self.eq_rhs.len() != self.eq_matrix.nrows() {
            return Err(ConicError::Dimension("equality rhs length".into()));
        }
        if self.ineq_rhs.len() != self.ineq_matrix.nrows() {
            return Err(ConicError::Dimension("cone rhs length".into()));
        }
        for cone in &self.cones {
            if let ConeSpec::SecondOrder(n) = cone {
                if *n < 2 {
                    return Err(ConicError::SocTooSmall(*n));
                }
            }
        }
        let cone_rows: usize = self.cones.iter().map(|c| c.size()).sum();
        if cone_rows != self.ineq_matrix.nrows() {
            return Err(ConicError::ConeRowMismatch {
                cones: cone_rows,
                rows: self.ineq_matrix.nrows(),
            });
        }
        Ok(())
    }

    /// Textual standard-form dump for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "variables: {}", self.n);
        let _ = writeln!(out, "cost: {:?}", self.cost);
        let _ = writeln!(out, "equalities: {}", self.eq_matrix.nrows());
        for (row, rhs) in self.eq_matrix.rows.iter().zip(&self.eq_rhs) {
            let _ = writeln!(out, "  {row:?} = {rhs}");
        }
        let _ = writeln!(out, "cone rows: {}", self.ineq_matrix.nrows());
        let mut at = 0;
        for cone in &self.cones {
            let _ = writeln!(out, "  block {cone:?}");
            for r in at..at + cone.size() {
                let _ = writeln!(out, "    {:?} + s = {}", self.ineq_matrix.rows[r], self.ineq_rhs[r]);
            }
            at += cone.size();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct ConeSolution {
    pub status: SolveStatus,
    /// Primal variables `z` (scaled by `1/tau`; infeasibility certificate ray
    /// when the status reports infeasibility).
    pub primal: Vec<f64>,
    /// Equality multipliers `y`.
    pub eq_dual: Vec<f64>,
    /// Cone multipliers `z_K`.
    pub cone_dual: Vec<f64>,
    /// Cone slacks `s`.
    pub slack: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

/// Incremental builder for [`ConeProgram`]s.
///
/// Rows added through [`add_ineq`](ProgramBuilder::add_ineq) accumulate into
/// one leading orthant block; SOC blocks keep their insertion order after it.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    n: usize,
    cost: Vec<f64>,
    eq_rows: Vec<(Vec<(usize, f64)>, f64)>,
    orthant_rows: Vec<(Vec<(usize, f64)>, f64)>,
    soc_blocks: Vec<Vec<(Vec<(usize, f64)>, f64)>>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Adds `count` variables, returning the index of the first.
    pub fn add_vars(&mut self, count: usize) -> usize {
        let first = self.n;
        self.n += count;
        self.cost.resize(self.n, 0.0);
        first
    }

    pub fn add_cost(&mut self, var: usize, coeff: f64) {
        self.cost[var] += coeff;
    }

    /// `row . z = rhs`.
    pub fn add_eq(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq_rows.push((row, rhs));
    }

    /// `row . z <= rhs` (one orthant slack).
    pub fn add_ineq(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.orthant_rows.push((row, rhs));
    }

    /// Adds a second-order block: slacks `s_i = rhs_i - row_i . z` with
    /// `s_0 >= ||s_1..||`.
    pub fn add_soc(&mut self, rows: Vec<(Vec<(usize, f64)>, f64)>) {
        assert!(rows.len() >= 2, "second-order blocks need at least two rows");
        self.soc_blocks.push(rows);
    }

    /// Norm epigraph of a factored quadratic: adds an auxiliary variable `t`
    /// with unit cost and the block `||L' (z_slice - shift)||_2 <= t`, where
    /// `chol_factor` is `L` (rows indexed like `var_slice`). The quadratic
    /// objective value `(z-shift)' L L' (z-shift)` is recovered as `t^2`.
    /// A zero/empty factor adds nothing and returns `None`.
    pub fn epigraph_soc(
        &mut self,
        chol_factor: &[Vec<f64>],
        var_slice: &[usize],
        shift: &[f64],
    ) -> Option<usize> {
        assert_eq!(chol_factor.len(), var_slice.len());
        assert_eq!(shift.len(), var_slice.len());
        let width = chol_factor.iter().map(|r| r.len()).max().unwrap_or(0);
        // columns of L that carry any weight
        let mut live_cols = Vec::new();
        for c in 0..width {
            if chol_factor.iter().any(|r| c < r.len() && r[c] != 0.0) {
                live_cols.push(c);
            }
        }
        if live_cols.is_empty() {
            return None;
        }
        let t = self.add_vars(1);
        self.add_cost(t, 1.0);
        let mut rows = Vec::with_capacity(1 + live_cols.len());
        rows.push((vec![(t, -1.0)], 0.0)); // s0 = t
        for &c in &live_cols {
            // s = (L' (z - shift))_c  ->  G row = -L'_c, h = -(L' shift)_c
            let mut row = Vec::new();
            let mut offset = 0.0;
            for (r, &var) in var_slice.iter().enumerate() {
                let l = if c < chol_factor[r].len() { chol_factor[r][c] } else { 0.0 };
                if l != 0.0 {
                    row.push((var, -l));
                    offset -= l * shift[r];
                }
            }
            rows.push((row, offset));
        }
        self.add_soc(rows);
        Some(t)
    }

    pub fn build(self) -> ConeProgram {
        let mut eq_matrix = SparseMatrix::new(self.n);
        let mut eq_rhs = Vec::with_capacity(self.eq_rows.len());
        for (row, rhs) in self.eq_rows {
            eq_matrix.push_row(row);
            eq_rhs.push(rhs);
        }
        let mut ineq_matrix = SparseMatrix::new(self.n);
        let mut ineq_rhs = Vec::new();
        let mut cones = Vec::new();
        if !self.orthant_rows.is_empty() {
            cones.push(ConeSpec::Orthant(self.orthant_rows.len()));
            for (row, rhs) in self.orthant_rows {
                ineq_matrix.push_row(row);
                ineq_rhs.push(rhs);
            }
        }
        for block in self.soc_blocks {
            cones.push(ConeSpec::SecondOrder(block.len()));
            for (row, rhs) in block {
                ineq_matrix.push_row(row);
                ineq_rhs.push(rhs);
            }
        }
        ConeProgram { n: self.n, cost: self.cost, eq_matrix, eq_rhs, ineq_matrix, ineq_rhs, cones }
    }
}

/// Solves a cone program; see [`SolverSettings`] for the remaining knobs
/// (fraction-to-boundary 0.99 and static KKT regularization 1e-9 by default).
pub fn solve(
    program: &ConeProgram,
    tol: f64,
    max_iter: usize,
) -> Result<ConeSolution, ConicError> {
    solver::solve_with(program, &SolverSettings { tol, max_iter, ..SolverSettings::default() })
}

pub fn solve_with(
    program: &ConeProgram,
    settings: &SolverSettings,
) -> Result<ConeSolution, ConicError> {
    solver::solve_with(program, settings)
}

/// Independent optimality certificate: recomputes feasibility residuals, cone
/// memberships, and the complementarity gap directly from the returned point,
/// outside the solver loop. Returns the worst normalized violation.
pub fn certify(program: &ConeProgram, sol: &ConeSolution, tol: f64) -> Result<f64, String> {
    let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let n_eq = program.eq_matrix.nrows();
    let n_co = program.ineq_matrix.nrows();

    let mut worst = 0.0f64;
    // primal feasibility
    let mut eq = vec![0.0; n_eq];
    program.eq_matrix.mul_vec(&sol.primal, &mut eq);
    for (r, v) in eq.iter_mut().enumerate() {
        *v -= program.eq_rhs[r];
    }
    worst = worst.max(norm_inf(&eq) / (1.0 + norm_inf(&program.eq_rhs)));
    let mut co = vec![0.0; n_co];
    program.ineq_matrix.mul_vec(&sol.primal, &mut co);
    for (r, v) in co.iter_mut().enumerate() {
        *v += sol.slack[r] - program.ineq_rhs[r];
    }
    worst = worst.max(norm_inf(&co) / (1.0 + norm_inf(&program.ineq_rhs)));
    // cone memberships
    let s_margin = cones::membership_margin(&program.cones, &sol.slack);
    let z_margin = cones::membership_margin(&program.cones, &sol.cone_dual);
    worst = worst.max(-s_margin).max(-z_margin);
    // dual feasibility: c + A'y + G'z = 0
    let mut dual = program.cost.clone();
    program.eq_matrix.mul_transpose_add(&sol.eq_dual, &mut dual);
    program.ineq_matrix.mul_transpose_add(&sol.cone_dual, &mut dual);
    worst = worst.max(norm_inf(&dual) / (1.0 + norm_inf(&program.cost)));
    // complementarity gap
    let gap: f64 = sol.slack.iter().zip(&sol.cone_dual).map(|(s, z)| s * z).sum();
    let pobj: f64 = program.cost.iter().zip(&sol.primal).map(|(c, x)| c * x).sum();
    worst = worst.max(gap.abs() / (1.0 + pobj.abs()));

    if worst <= tol {
        Ok(worst)
    } else {
        Err(format!("certificate violation {worst:.3e} exceeds {tol:.3e}"))
    }
}
