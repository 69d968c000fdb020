//! Randomized solver battery: LPs checked against brute-force vertex
//! enumeration, SOCPs checked through the independent KKT certifier, plus
//! scaling-invariance and bitwise-determinism checks.

use gpcscp_conic::{certify, solve, ConeProgram, ProgramBuilder, SolveStatus};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting for the tiny vertex systems.
fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-10 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Exhaustive minimum of `cost' x` over `{x : rows x <= rhs}` by enumerating
/// all n-subsets of active constraints. Assumes the region is bounded with a
/// strictly feasible interior, so the optimum sits on a vertex.
fn vertex_enumeration_optimum(
    cost: &[f64],
    rows: &[Vec<f64>],
    rhs: &[f64],
) -> Option<(f64, Vec<f64>)> {
    let n = cost.len();
    let m = rows.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pick = vec![0usize; n];
    fn rec(
        start: usize,
        depth: usize,
        n: usize,
        m: usize,
        pick: &mut Vec<usize>,
        cost: &[f64],
        rows: &[Vec<f64>],
        rhs: &[f64],
        best: &mut Option<(f64, Vec<f64>)>,
    ) {
        if depth == n {
            let a: Vec<Vec<f64>> = pick.iter().map(|&i| rows[i].clone()).collect();
            let b: Vec<f64> = pick.iter().map(|&i| rhs[i]).collect();
            if let Some(x) = dense_solve(&a, &b) {
                let feasible = rows
                    .iter()
                    .zip(rhs)
                    .all(|(row, &r)| row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() <= r + 1e-9);
                if feasible {
                    let obj: f64 = cost.iter().zip(&x).map(|(c, v)| c * v).sum();
                    if best.as_ref().map_or(true, |(bo, _)| obj < *bo) {
                        *best = Some((obj, x));
                    }
                }
            }
            return;
        }
        for i in start..m {
            pick[depth] = i;
            rec(i + 1, depth + 1, n, m, pick, cost, rows, rhs, best);
        }
    }
    rec(0, 0, n, m, &mut pick, cost, rows, rhs, &mut best);
    best
}

/// Random bounded LP with 0 strictly feasible: box bounds plus extra rows.
fn random_lp(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let n = rng.gen_range(2..=4);
    let extra = rng.gen_range(2..=5);
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let bound = rng.gen_range(0.5..3.0);
        let mut lo = vec![0.0; n];
        lo[i] = -1.0;
        rows.push(lo);
        rhs.push(bound);
        let mut hi = vec![0.0; n];
        hi[i] = 1.0;
        rows.push(hi);
        rhs.push(rng.gen_range(0.5..3.0));
    }
    for _ in 0..extra {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        rows.push(row);
        rhs.push(rng.gen_range(0.1..1.1)); // keeps 0 strictly inside
    }
    let cost: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (cost, rows, rhs)
}

fn lp_program(cost: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> ConeProgram {
    let mut pb = ProgramBuilder::new();
    let x0 = pb.add_vars(cost.len());
    for (i, &c) in cost.iter().enumerate() {
        pb.add_cost(x0 + i, c);
    }
    for (row, &r) in rows.iter().zip(rhs) {
        let entries: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, &v)| (x0 + j, v))
            .collect();
        pb.add_ineq(entries, r);
    }
    pb.build()
}

#[test]
fn fifty_random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for case in 0..50 {
        let (cost, rows, rhs) = random_lp(&mut rng);
        let (ref_obj, _) =
            vertex_enumeration_optimum(&cost, &rows, &rhs).expect("bounded feasible LP");
        let sol = solve(&lp_program(&cost, &rows, &rhs), 1e-8, 100).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "case {case}");
        assert!(
            (sol.objective - ref_obj).abs() <= 1e-7 * (1.0 + ref_obj.abs()),
            "case {case}: interior point {} vs vertex enumeration {}",
            sol.objective,
            ref_obj
        );
    }
}

/// Random SOCP with a strictly feasible interior: box bounds, one or two
/// second-order blocks `||D x + e|| <= f'x + g`, random cost.
fn random_socp(rng: &mut ChaCha8Rng) -> ConeProgram {
    let n = rng.gen_range(3..=6);
    let mut pb = ProgramBuilder::new();
    let x0 = pb.add_vars(n);
    let anchor: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    for i in 0..n {
        pb.add_cost(x0 + i, rng.gen_range(-1.0..1.0));
        pb.add_ineq(vec![(x0 + i, 1.0)], anchor[i] + rng.gen_range(0.5..2.0));
        pb.add_ineq(vec![(x0 + i, -1.0)], -anchor[i] + rng.gen_range(0.5..2.0));
    }
    for _ in 0..rng.gen_range(1..=2) {
        let k = rng.gen_range(2..=3); // rows of D
        let d: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let e: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        // choose g for margin 0.5 at the anchor point
        let dx_e: Vec<f64> = (0..k)
            .map(|r| e[r] + d[r].iter().zip(&anchor).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let norm = dx_e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fx: f64 = f.iter().zip(&anchor).map(|(a, b)| a * b).sum();
        let g = norm + 0.5 - fx;
        let mut block = Vec::with_capacity(1 + k);
        block.push((
            f.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, &v)| (x0 + j, -v))
                .collect::<Vec<_>>(),
            g,
        ));
        for r in 0..k {
            block.push((
                d[r].iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, &v)| (x0 + j, -v))
                    .collect::<Vec<_>>(),
                e[r],
            ));
        }
        pb.add_soc(block);
    }
    pb.build()
}

#[test]
fn twenty_random_socps_pass_independent_certification() {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for case in 0..20 {
        let p = random_socp(&mut rng);
        let sol = solve(&p, 1e-8, 100).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "case {case}");
        let worst = certify(&p, &sol, 1e-8)
            .unwrap_or_else(|e| panic!("case {case} failed certification: {e}"));
        assert!(worst <= 1e-8);
    }
}

/// Euclidean projection of a point onto a box, phrased as an SOCP:
/// `min t` s.t. `||x - target|| <= t`, `lo <= x <= hi`. The optimum is the
/// componentwise clamp of the target — strongly unique, so the argmin is a
/// meaningful comparison point.
fn projection_socp(
    lo: &[f64],
    hi: &[f64],
    target: &[f64],
    cost_scale: f64,
) -> gpcscp_conic::ConeProgram {
    let n = lo.len();
    let mut pb = ProgramBuilder::new();
    let x = pb.add_vars(n);
    let t = pb.add_vars(1);
    pb.add_cost(t, cost_scale);
    for i in 0..n {
        pb.add_ineq(vec![(x + i, 1.0)], hi[i]);
        pb.add_ineq(vec![(x + i, -1.0)], -lo[i]);
    }
    let mut block = vec![(vec![(t, -1.0)], 0.0)];
    for i in 0..n {
        block.push((vec![(x + i, -1.0)], -target[i]));
    }
    pb.add_soc(block);
    pb.build()
}

#[test]
fn argmin_invariant_under_cost_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..10 {
        let n = rng.gen_range(2..=6);
        let lo: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.5..2.0)).collect();
        let hi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut target: Vec<f64> = (0..n)
            .map(|i| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(lo[i] + 0.2..hi[i] - 0.2)
                } else {
                    hi[i] + rng.gen_range(0.5..1.5)
                }
            })
            .collect();
        target[0] = hi[0] + rng.gen_range(0.5..1.5); // at least one clamp
        let expected: Vec<f64> = target
            .iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(lo[i], hi[i]))
            .collect();

        let sol = solve(&projection_socp(&lo, &hi, &target, 1.0), 1e-10, 100).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "case {case}");
        let sol_c = solve(&projection_socp(&lo, &hi, &target, 1e3), 1e-10, 100).unwrap();
        assert_eq!(sol_c.status, SolveStatus::Optimal, "case {case} scaled");
        for i in 0..n {
            // interior coordinates are quadratically flat (they move t only at
            // second order), so their recovery accuracy is ~sqrt(gap)
            assert!(
                (sol.primal[i] - expected[i]).abs() <= 5e-5,
                "case {case} coord {i}: {} vs clamp {}",
                sol.primal[i],
                expected[i]
            );
            assert!(
                (sol.primal[i] - sol_c.primal[i]).abs() <= 1e-6,
                "case {case} coord {i}: {} vs scaled {}",
                sol.primal[i],
                sol_c.primal[i]
            );
        }
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = random_socp(&mut rng);
    let first = solve(&p, 1e-8, 100).unwrap();
    for _ in 0..3 {
        let again = solve(&p, 1e-8, 100).unwrap();
        assert_eq!(first.iterations, again.iterations);
        assert_eq!(first.objective.to_bits(), again.objective.to_bits());
        for (a, b) in first.primal.iter().zip(&again.primal) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in first.cone_dual.iter().zip(&again.cone_dual) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn mixed_cone_program_with_equalities_certifies() {
    // minimize x1 + 2 x2 subject to x1 + x2 + x3 = 1, x >= 0, ||(x2, x3)|| <= x1
    let mut pb = ProgramBuilder::new();
    let x = pb.add_vars(3);
    pb.add_cost(x, 1.0);
    pb.add_cost(x + 1, 2.0);
    pb.add_eq(vec![(x, 1.0), (x + 1, 1.0), (x + 2, 1.0)], 1.0);
    for i in 0..3 {
        pb.add_ineq(vec![(x + i, -1.0)], 0.0);
    }
    pb.add_soc(vec![
        (vec![(x, -1.0)], 0.0),
        (vec![(x + 1, -1.0)], 0.0),
        (vec![(x + 2, -1.0)], 0.0),
    ]);
    let p = pb.build();
    let sol = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    certify(&p, &sol, 1e-7).unwrap();
    // x1 >= ||(x2,x3)|| and x1+x2+x3 = 1 with cost favoring x3 in the tail:
    // optimum is x = (x1, 0, x3) with x1 = x3 -> x = (0.5, 0, 0.5), objective 0.5
    assert!((sol.objective - 0.5).abs() < 1e-7, "objective {}", sol.objective);
}
