//! Reduced KKT system for the interior-point iterations.
//!
//! Eliminating the scaled cone block from
//!
//! ```text
//!   [ 0   A'   G'  ] [dx]   [bx]
//!   [ A   0    0   ] [dy] = [by]
//!   [ G   0  -W'W  ] [dz]   [bz]
//! ```
//!
//! gives the symmetric quasidefinite system
//!
//! ```text
//!   [ H   A' ] [dx]   [bx + G' W^{-2} bz]        H = (W^{-1}G)' (W^{-1}G)
//!   [ A   0  ] [dy] = [by]
//! ```
//!
//! which is factored densely (Bunch-Kaufman) with static regularization
//! `+delta I / -delta I` on the diagonal, followed by iterative refinement
//! against the unregularized matrix. `dz = W^{-2}(G dx - bz)` recovers the
//! cone direction. `H` is assembled blockwise from the sparse rows of `G`:
//! orthant rows contribute scaled rank-one terms, second-order blocks a small
//! dense product over their active columns.

use crate::cones::{apply_scaling, BlockScaling, Scalings};
use crate::{ConeProgram, ConeSpec};
use faer::prelude::*;

pub struct KktSystem {
    n: usize,
    p: usize,
    /// Dense template holding the constant `A` blocks.
    base: faer::Mat<f64>,
    /// Exact reduced matrix of the current factorization (for refinement).
    exact: faer::Mat<f64>,
    factor: Option<faer::linalg::solvers::Lblt<f64>>,
    delta: f64,
    refine_rounds: usize,
}

impl KktSystem {
    pub fn new(program: &ConeProgram, delta: f64, refine_rounds: usize) -> Self {
        let n = program.n;
        let p = program.eq_matrix.nrows();
        let mut base = faer::Mat::<f64>::zeros(n + p, n + p);
        for (r, row) in program.eq_matrix.rows.iter().enumerate() {
            for &(c, v) in row {
                base[(n + r, c)] = v;
                base[(c, n + r)] = v;
            }
        }
        let exact = base.clone();
        KktSystem { n, p, base, exact, factor: None, delta, refine_rounds }
    }

    pub fn dim(&self) -> usize {
        self.n + self.p
    }

    /// Assembles `H` for the given NT scaling and refactors.
    pub fn factor(&mut self, program: &ConeProgram, scalings: &[BlockScaling]) {
        let n = self.n;
        let mut k = self.base.clone();
        let mut at = 0;
        for (cone, scal) in program.cones.iter().zip(scalings) {
            match (cone, scal) {
                (ConeSpec::Orthant(sz), BlockScaling::Orthant { w }) => {
                    for i in 0..*sz {
                        let row = &program.ineq_matrix.rows[at + i];
                        let d = 1.0 / (w[i] * w[i]);
                        for &(c1, v1) in row {
                            for &(c2, v2) in row {
                                if c2 <= c1 {
                                    k[(c1, c2)] += d * v1 * v2;
                                }
                            }
                        }
                    }
                    at += sz;
                }
                (ConeSpec::SecondOrder(sz), BlockScaling::Soc { eta, wb }) => {
                    // active columns of this block
                    let mut cols: Vec<usize> = program.ineq_matrix.rows[at..at + sz]
                        .iter()
                        .flat_map(|row| row.iter().map(|&(c, _)| c))
                        .collect();
                    cols.sort_unstable();
                    cols.dedup();
                    let nc = cols.len();
                    if nc == 0 {
                        at += sz;
                        continue;
                    }
                    let col_pos = |c: usize| cols.binary_search(&c).expect("active column");
                    // dense block B (sz x nc) of G rows
                    let mut b = vec![0.0; sz * nc];
                    for i in 0..*sz {
                        for &(c, v) in &program.ineq_matrix.rows[at + i] {
                            b[i * nc + col_pos(c)] = v;
                        }
                    }
                    // scaled block W^{-1} B, column by column:
                    // (W^{-1}b)_0 = (wb0 b0 - wb1'b1)/eta
                    // (W^{-1}b)_i = (b_i + (-b0 + wb1'b1/(1+wb0)) wb_i)/eta
                    let mut a = vec![0.0; nc];
                    for j in 0..nc {
                        let mut acc = 0.0;
                        for i in 1..*sz {
                            acc += wb[i] * b[i * nc + j];
                        }
                        a[j] = acc;
                    }
                    let mut sb = vec![0.0; sz * nc];
                    for j in 0..nc {
                        sb[j] = (wb[0] * b[j] - a[j]) / eta;
                    }
                    for j in 0..nc {
                        let coef = -b[j] + a[j] / (1.0 + wb[0]);
                        for i in 1..*sz {
                            sb[i * nc + j] = (b[i * nc + j] + coef * wb[i]) / eta;
                        }
                    }
                    // H_cols += (W^{-1}B)' (W^{-1}B), lower triangle
                    for j1 in 0..nc {
                        for j2 in 0..=j1 {
                            let mut acc = 0.0;
                            for i in 0..*sz {
                                acc += sb[i * nc + j1] * sb[i * nc + j2];
                            }
                            let (c1, c2) = (cols[j1], cols[j2]);
                            if c1 >= c2 {
                                k[(c1, c2)] += acc;
                            } else {
                                k[(c2, c1)] += acc;
                            }
                        }
                    }
                    at += sz;
                }
                _ => unreachable!("cone/scaling lists are built together"),
            }
        }
        // mirror the H block (A blocks in `base` are already symmetric)
        for i in 0..n {
            for j in 0..i {
                k[(j, i)] = k[(i, j)];
            }
        }
        self.exact.copy_from(&k);
        for i in 0..self.dim() {
            k[(i, i)] += if i < n { self.delta } else { -self.delta };
        }
        self.factor = Some(k.lblt(faer::Side::Lower));
    }

    /// Solves the reduced system for `(dx, dy)` with iterative refinement.
    pub fn solve_reduced(&self, rhs_x: &[f64], rhs_y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let factor = self.factor.as_ref().expect("factor() before solve");
        let mut rhs = faer::Mat::<f64>::zeros(dim, 1);
        for (i, &v) in rhs_x.iter().enumerate() {
            rhs[(i, 0)] = v;
        }
        for (i, &v) in rhs_y.iter().enumerate() {
            rhs[(self.n + i, 0)] = v;
        }
        let mut sol = factor.solve(&rhs);
        for _ in 0..self.refine_rounds {
            let mut resid = rhs.clone();
            let prod = &self.exact * &sol;
            for i in 0..dim {
                resid[(i, 0)] -= prod[(i, 0)];
            }
            let corr = factor.solve(&resid);
            for i in 0..dim {
                sol[(i, 0)] += corr[(i, 0)];
            }
        }
        let dx = (0..self.n).map(|i| sol[(i, 0)]).collect();
        let dy = (0..self.p).map(|i| sol[(self.n + i, 0)]).collect();
        (dx, dy)
    }

    /// Full elimination solve: given `(bx, by, bz)` of the 3x3 system returns
    /// `(dx, dy, dz)`, with refinement against the unreduced equations (the
    /// reduced matrix `G'W^{-2}G` squares the scaling's conditioning, so
    /// residuals are measured on the factored form instead).
    pub fn solve_full(
        &self,
        program: &ConeProgram,
        scalings: &[BlockScaling],
        bx: &[f64],
        by: &[f64],
        bz: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut dx, mut dy, mut dz) = self.eliminate(program, scalings, bx, by, bz);
        let m = program.ineq_matrix.nrows();
        let mut t1 = vec![0.0; m];
        let mut t2 = vec![0.0; m];
        for _ in 0..self.refine_rounds {
            // rx = bx - A'dy - G'dz; ry = by - A dx; rz = bz - G dx + W(W dz)
            let mut rx = bx.to_vec();
            let neg_dy: Vec<f64> = dy.iter().map(|v| -v).collect();
            let neg_dz: Vec<f64> = dz.iter().map(|v| -v).collect();
            program.eq_matrix.mul_transpose_add(&neg_dy, &mut rx);
            program.ineq_matrix.mul_transpose_add(&neg_dz, &mut rx);
            let mut ry = vec![0.0; self.p];
            program.eq_matrix.mul_vec(&dx, &mut ry);
            for (i, v) in ry.iter_mut().enumerate() {
                *v = by[i] - *v;
            }
            let mut rz = vec![0.0; m];
            program.ineq_matrix.mul_vec(&dx, &mut rz);
            apply_scaling(&program.cones, scalings, &dz, &mut t1, false);
            apply_scaling(&program.cones, scalings, &t1, &mut t2, false);
            for i in 0..m {
                rz[i] = bz[i] - rz[i] + t2[i];
            }
            let worst = rx
                .iter()
                .chain(&ry)
                .chain(&rz)
                .fold(0.0f64, |a, v| a.max(v.abs()));
            if worst < 1e-14 {
                break;
            }
            let (ex, ey, ez) = self.eliminate(program, scalings, &rx, &ry, &rz);
            for (v, e) in dx.iter_mut().zip(&ex) {
                *v += e;
            }
            for (v, e) in dy.iter_mut().zip(&ey) {
                *v += e;
            }
            for (v, e) in dz.iter_mut().zip(&ez) {
                *v += e;
            }
        }
        (dx, dy, dz)
    }

    fn eliminate(
        &self,
        program: &ConeProgram,
        scalings: &[BlockScaling],
        bx: &[f64],
        by: &[f64],
        bz: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let m = program.ineq_matrix.nrows();
        let mut t1 = vec![0.0; m];
        let mut t2 = vec![0.0; m];
        apply_scaling(&program.cones, scalings, bz, &mut t1, true);
        apply_scaling(&program.cones, scalings, &t1, &mut t2, true);
        let mut rx = bx.to_vec();
        program.ineq_matrix.mul_transpose_add(&t2, &mut rx);
        let (dx, dy) = self.solve_reduced(&rx, by);
        // dz = W^{-2} (G dx - bz)
        let mut gdx = vec![0.0; m];
        program.ineq_matrix.mul_vec(&dx, &mut gdx);
        for i in 0..m {
            gdx[i] -= bz[i];
        }
        apply_scaling(&program.cones, scalings, &gdx, &mut t1, true);
        let mut dz = vec![0.0; m];
        apply_scaling(&program.cones, scalings, &t1, &mut dz, true);
        (dx, dy, dz)
    }
}
