//! Cone-wise operations for the nonnegative orthant and second-order cones:
//! Nesterov-Todd scalings, Jordan products, boundary steps, and memberships.
//!
//! Vectors over the full cone `K = K_1 x ... x K_r` are stored contiguously;
//! every function below walks the block structure. For a second-order block
//! `(s0, s1)` membership means `s0 >= ||s1||_2`, and the Jordan product is
//! `u o v = (u'v, u0 v1 + v0 u1)`.

use crate::ConeSpec;

/// Nesterov-Todd scaling state for one cone block.
///
/// For the orthant, `w[i] = sqrt(s_i / z_i)`. For a second-order cone the
/// scaling matrix is the symmetric square root
///
/// ```text
///   W = eta [ wb0  wb1'                        ]
///           [ wb1  I + wb1 wb1' / (1 + wb0)    ]
/// ```
///
/// with `wb'J wb = 1` for `J = diag(1, -I)`, so `W^2 = eta^2 (2 wb wb' - J)`
/// and `W z = W^{-1} s = lambda`.
#[derive(Debug, Clone)]
pub enum BlockScaling {
    Orthant { w: Vec<f64> },
    Soc { eta: f64, wb: Vec<f64> },
}

/// Scaled point `lambda = W z` for the full cone, kept blockwise.
pub type Scalings = Vec<BlockScaling>;

pub fn block_sizes(cones: &[ConeSpec]) -> Vec<usize> {
    cones.iter().map(|c| c.size()).collect()
}

pub fn cone_dim(cones: &[ConeSpec]) -> usize {
    cones.iter().map(|c| c.size()).sum()
}

/// Barrier degree: one per orthant coordinate, one per SOC block.
pub fn barrier_degree(cones: &[ConeSpec]) -> usize {
    cones
        .iter()
        .map(|c| match c {
            ConeSpec::Orthant(n) => *n,
            ConeSpec::SecondOrder(_) => 1,
        })
        .sum()
}

/// Writes the identity element `e` of the cone algebra into `out`.
pub fn identity(cones: &[ConeSpec], out: &mut [f64]) {
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                out[at..at + n].fill(1.0);
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                out[at] = 1.0;
                out[at + 1..at + n].fill(0.0);
                at += n;
            }
        }
    }
}

/// Margin to the cone boundary: positive inside, negative outside. For the
/// orthant the margin of a block is `min_i v_i`; for an SOC block it is
/// `v0 - ||v1||`.
pub fn membership_margin(cones: &[ConeSpec], v: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                for &x in &v[at..at + n] {
                    margin = margin.min(x);
                }
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                let norm = norm2(&v[at + 1..at + n]);
                margin = margin.min(v[at] - norm);
                at += n;
            }
        }
    }
    margin
}

/// Shifts `v` just inside the cone when its margin is nonpositive:
/// `v + (1 + margin_violation) e`, the usual initialization correction.
pub fn push_interior(cones: &[ConeSpec], v: &mut [f64]) {
    let margin = membership_margin(cones, v);
    if margin > 0.0 {
        return;
    }
    let shift = 1.0 - margin;
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                for x in &mut v[at..at + n] {
                    *x += shift;
                }
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                v[at] += shift;
                at += n;
            }
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Computes the NT scaling and the scaled point `lambda = W z = W^{-1} s`.
/// Requires `s` and `z` strictly interior.
pub fn nt_scaling(cones: &[ConeSpec], s: &[f64], z: &[f64], lambda: &mut [f64]) -> Scalings {
    let mut out = Vec::with_capacity(cones.len());
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                let mut w = Vec::with_capacity(*n);
                for i in at..at + n {
                    w.push((s[i] / z[i]).sqrt());
                    lambda[i] = (s[i] * z[i]).sqrt();
                }
                out.push(BlockScaling::Orthant { w });
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                let sb = &s[at..at + n];
                let zb = &z[at..at + n];
                // Jordan determinant in product form (s0 - ||s1||)(s0 + ||s1||)
                // to avoid squaring away the boundary margin
                let sn = norm2(&sb[1..]);
                let zn = norm2(&zb[1..]);
                let sj = ((sb[0] - sn).max(1e-300) * (sb[0] + sn)).max(1e-300);
                let zj = ((zb[0] - zn).max(1e-300) * (zb[0] + zn)).max(1e-300);
                let s_res = sj.sqrt();
                let z_res = zj.sqrt();
                // normalized points on the hyperbolic unit shell
                let snorm: Vec<f64> = sb.iter().map(|x| x / s_res).collect();
                let znorm: Vec<f64> = zb.iter().map(|x| x / z_res).collect();
                let gamma = ((1.0 + dot(&snorm, &znorm)) / 2.0).max(f64::MIN_POSITIVE).sqrt();
                // wb = (snorm + J znorm) / (2 gamma), wb'J wb = 1
                let mut wb = Vec::with_capacity(*n);
                wb.push((snorm[0] + znorm[0]) / (2.0 * gamma));
                for i in 1..*n {
                    wb.push((snorm[i] - znorm[i]) / (2.0 * gamma));
                }
                let eta = (sj / zj).powf(0.25);
                // lambda = W z
                let a = dot(&wb[1..], &zb[1..]);
                lambda[at] = eta * (wb[0] * zb[0] + a);
                let coef = zb[0] + a / (1.0 + wb[0]);
                for i in 1..*n {
                    lambda[at + i] = eta * (zb[i] + coef * wb[i]);
                }
                out.push(BlockScaling::Soc { eta, wb });
                at += n;
            }
        }
    }
    out
}

/// Applies `W` (`inverse = false`) or `W^{-1}` (`inverse = true`) blockwise;
/// both are symmetric. For SOC, `W^{-1}` is `W` with `wb1` negated and
/// `eta` reciprocated.
pub fn apply_scaling(
    cones: &[ConeSpec],
    scalings: &[BlockScaling],
    x: &[f64],
    out: &mut [f64],
    inverse: bool,
) {
    let mut at = 0;
    for (cone, scal) in cones.iter().zip(scalings) {
        match (cone, scal) {
            (ConeSpec::Orthant(n), BlockScaling::Orthant { w }) => {
                for i in 0..*n {
                    out[at + i] = if inverse { x[at + i] / w[i] } else { x[at + i] * w[i] };
                }
                at += n;
            }
            (ConeSpec::SecondOrder(n), BlockScaling::Soc { eta, wb }) => {
                let xb = &x[at..at + n];
                let a = dot(&wb[1..], &xb[1..]);
                if inverse {
                    out[at] = (wb[0] * xb[0] - a) / eta;
                    let coef = -xb[0] + a / (1.0 + wb[0]);
                    for i in 1..*n {
                        out[at + i] = (xb[i] + coef * wb[i]) / eta;
                    }
                } else {
                    out[at] = eta * (wb[0] * xb[0] + a);
                    let coef = xb[0] + a / (1.0 + wb[0]);
                    for i in 1..*n {
                        out[at + i] = eta * (xb[i] + coef * wb[i]);
                    }
                }
                at += n;
            }
            _ => unreachable!("cone and scaling lists are built together"),
        }
    }
}

/// Jordan product `u o v` blockwise.
pub fn jordan_product(cones: &[ConeSpec], u: &[f64], v: &[f64], out: &mut [f64]) {
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                for i in at..at + n {
                    out[i] = u[i] * v[i];
                }
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                let ub = &u[at..at + n];
                let vb = &v[at..at + n];
                let head = dot(ub, vb);
                for i in 1..*n {
                    out[at + i] = ub[0] * vb[i] + vb[0] * ub[i];
                }
                out[at] = head;
                at += n;
            }
        }
    }
}

/// Solves `lambda o u = d` for `u` blockwise (inverse Jordan product).
pub fn jordan_solve(cones: &[ConeSpec], lambda: &[f64], d: &[f64], out: &mut [f64]) {
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                for i in at..at + n {
                    out[i] = d[i] / lambda[i];
                }
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                let lb = &lambda[at..at + n];
                let db = &d[at..at + n];
                let l1l1 = dot(&lb[1..], &lb[1..]);
                let det = lb[0] * lb[0] - l1l1;
                let u0 = (lb[0] * db[0] - dot(&lb[1..], &db[1..])) / det;
                out[at] = u0;
                for i in 1..*n {
                    out[at + i] = (db[i] - u0 * lb[i]) / lb[0];
                }
                at += n;
            }
        }
    }
}

/// Largest step `alpha >= 0` with `v + alpha dv` still in the cone; `f64::INFINITY`
/// when the whole ray stays inside.
pub fn step_to_boundary(cones: &[ConeSpec], v: &[f64], dv: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    let mut at = 0;
    for cone in cones {
        match cone {
            ConeSpec::Orthant(n) => {
                for i in at..at + n {
                    if dv[i] < 0.0 {
                        alpha = alpha.min(-v[i] / dv[i]);
                    }
                }
                at += n;
            }
            ConeSpec::SecondOrder(n) => {
                let vb = &v[at..at + n];
                let db = &dv[at..at + n];
                // roots of ||v1 + a d1||^2 = (v0 + a d0)^2
                let a = dot(&db[1..], &db[1..]) - db[0] * db[0];
                let b = 2.0 * (dot(&vb[1..], &db[1..]) - vb[0] * db[0]);
                let c = dot(&vb[1..], &vb[1..]) - vb[0] * vb[0]; // < 0 inside
                let mut best = f64::INFINITY;
                if a.abs() < 1e-14 {
                    if b > 0.0 {
                        best = -c / b;
                    }
                } else {
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for root in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            if root > 0.0 && (v[at] + root * db[0]) >= 0.0 {
                                best = best.min(root);
                            }
                        }
                    }
                }
                alpha = alpha.min(best);
                at += n;
            }
        }
    }
    alpha.max(0.0)
}
