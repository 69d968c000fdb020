//! Multivariate probabilists' Hermite polynomial basis and Gauss-Hermite
//! quadrature for the standard normal measure.
//!
//! The basis spans all multivariate Hermite polynomials
//! `phi_alpha(xi) = prod_i He_{alpha_i}(xi_i)` with total degree
//! `|alpha| <= order`, enumerated in graded lexicographic order so that
//! `phi_0 = 1` and the degree-one polynomial in germ dimension `g` sits at
//! linear index `1 + g`. Squared norms are `E[phi_alpha^2] = prod_i alpha_i!`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BasisError {
    #[error("germ dimension must be at least 1")]
    ZeroDimension,
    #[error("quadrature rule needs at least one point per dimension")]
    ZeroPoints,
    #[error("quadrature dimension {rule} does not match basis dimension {basis}")]
    DimensionMismatch { rule: usize, basis: usize },
}

/// Exponent vector of one multivariate Hermite polynomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// Truncated multivariate probabilists' Hermite basis.
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    /// Germ dimension `d_xi`.
    pub dim: usize,
    /// Maximum total polynomial degree `P`.
    pub order: u32,
    /// Multi-indices in graded lexicographic order; `indices[0]` is all-zero.
    pub indices: Vec<MultiIndex>,
    /// `norms_sq[j] = E[phi_j^2] = prod_i alpha_i!`.
    pub norms_sq: Vec<f64>,
}

/// Tensorized Gauss-Hermite rule for the standard normal measure; weights sum
/// to one and an `m`-point rule per dimension is exact to total degree
/// `2m - 1` in each dimension.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dim: usize,
    pub points_per_dim: usize,
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

/// Default points per dimension for projecting a basis of order `p`: the
/// integrands are products of two basis polynomials and the model
/// nonlinearity, so a margin of three degrees above `p` is used.
pub fn default_quad_points(order: u32) -> usize {
    order as usize + 3
}

/// Evaluates the univariate probabilists' Hermite polynomial `He_n(x)` by the
/// three-term recurrence `He_{n+1} = x He_n - n He_{n-1}`.
pub fn hermite_univariate(n: u32, x: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = x;
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Enumerates multi-indices of total degree `grade` over `dim` dimensions in
/// lexicographic order with the first dimension most significant, descending
/// (so `(1,0)` precedes `(0,1)`).
fn compositions(grade: u32, dim: usize, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if dim == 1 {
        prefix.push(grade);
        out.push(MultiIndex(prefix.clone()));
        prefix.pop();
        return;
    }
    for first in (0..=grade).rev() {
        prefix.push(first);
        compositions(grade - first, dim - 1, prefix, out);
        prefix.pop();
    }
}

/// Builds the truncated basis for `dim` germ dimensions and maximum total
/// degree `order`. The number of terms is `binom(order + dim, dim)`.
pub fn build_basis(dim: usize, order: u32) -> Result<HermiteBasis, BasisError> {
    if dim == 0 {
        return Err(BasisError::ZeroDimension);
    }
    let mut indices = Vec::new();
    for grade in 0..=order {
        compositions(grade, dim, &mut Vec::new(), &mut indices);
    }
    let norms_sq = indices
        .iter()
        .map(|mi| mi.0.iter().map(|&a| factorial(a)).product())
        .collect();
    Ok(HermiteBasis { dim, order, indices, norms_sq })
}

impl HermiteBasis {
    /// Number of basis terms `l + 1`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Linear index of the degree-one polynomial in germ dimension `g`.
    pub fn linear_index(&self, germ_dim: usize) -> usize {
        debug_assert!(germ_dim < self.dim);
        1 + germ_dim
    }

    /// Evaluates basis polynomial `j` at a germ sample.
    pub fn eval(&self, j: usize, xi: &DVector<f64>) -> f64 {
        self.indices[j]
            .0
            .iter()
            .zip(xi.iter())
            .map(|(&a, &x)| hermite_univariate(a, x))
            .product()
    }

    /// Evaluates all basis polynomials at a germ sample.
    pub fn eval_all(&self, xi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |j, _| self.eval(j, xi))
    }

    /// Matrix of basis values at the quadrature nodes, `n_nodes x len()`.
    pub fn eval_at_nodes(&self, rule: &QuadratureRule) -> Result<DMatrix<f64>, BasisError> {
        if rule.dim != self.dim {
            return Err(BasisError::DimensionMismatch { rule: rule.dim, basis: self.dim });
        }
        Ok(DMatrix::from_fn(rule.nodes.len(), self.len(), |k, j| {
            self.eval(j, &rule.nodes[k])
        }))
    }
}

/// Univariate probabilists' Gauss-Hermite rule by the Golub-Welsch method:
/// eigen-decomposition of the Jacobi matrix of the `He` recurrence (zero
/// diagonal, off-diagonal `sqrt(k)`); weights are the squared first
/// eigenvector components, which already sum to one for the unit-mass
/// normal measure.
fn gauss_hermite_1d(points: usize) -> (Vec<f64>, Vec<f64>) {
    if points == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jacobi = DMatrix::<f64>::zeros(points, points);
    for k in 1..points {
        let b = (k as f64).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..points)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("eigenvalues are finite"));
    pairs.into_iter().unzip()
}

/// Tensorized Gauss-Hermite rule over `dim` germ dimensions.
pub fn gauss_hermite(points_per_dim: usize, dim: usize) -> Result<QuadratureRule, BasisError> {
    if dim == 0 {
        return Err(BasisError::ZeroDimension);
    }
    if points_per_dim == 0 {
        return Err(BasisError::ZeroPoints);
    }
    let (nodes_1d, weights_1d) = gauss_hermite_1d(points_per_dim);
    let total = points_per_dim.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut counter = vec![0usize; dim];
    for _ in 0..total {
        let node = DVector::from_fn(dim, |i, _| nodes_1d[counter[i]]);
        let weight: f64 = counter.iter().map(|&c| weights_1d[c]).product();
        nodes.push(node);
        weights.push(weight);
        for i in (0..dim).rev() {
            counter[i] += 1;
            if counter[i] < points_per_dim {
                break;
            }
            counter[i] = 0;
        }
    }
    Ok(QuadratureRule { dim, points_per_dim, nodes, weights })
}

/// Expectation of `f` under the standard normal measure by quadrature.
pub fn expect<F: Fn(&DVector<f64>) -> f64>(rule: &QuadratureRule, f: F) -> f64 {
    rule.nodes
        .iter()
        .zip(rule.weights.iter())
        .map(|(node, &w)| w * f(node))
        .fold(0.0, |acc, v| acc + v)
}
