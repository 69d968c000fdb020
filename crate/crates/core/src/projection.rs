//! Galerkin projection of an SDE onto the truncated Hermite basis by
//! stochastic collocation: the random state is expanded as
//! `x_i(xi) = sum_j x_ij phi_j(xi)` and the stochastic dynamics become a
//! deterministic ODE in the coefficients `x_ij`, discretized forward-Euler
//! with the diffusion entering through a `sqrt(dt)` germ term.
//!
//! Each Wiener channel is tied to one fixed germ dimension for the whole
//! horizon (no per-step resampling), and uncertain initial components get
//! their own germ dimensions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{BasisError, HermiteBasis, QuadratureRule};
use crate::models::SdeModel;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("germ map needs at least one dimension")]
    EmptyGermMap,
    #[error("germ dimension {germ} out of range for d_xi = {dim}")]
    GermOutOfRange { germ: usize, dim: usize },
    #[error("germ dimension {germ} assigned twice")]
    DuplicateGerm { germ: usize },
    #[error("state component {comp} out of range for d_x = {d_x}")]
    ComponentOutOfRange { comp: usize, d_x: usize },
    #[error("state component {comp} has nonzero stdev but no assigned germ dimension")]
    UnassignedInitial { comp: usize },
    #[error("noise channel {channel} has no assigned germ dimension")]
    UnassignedChannel { channel: usize },
    #[error("basis dimension {basis} does not match germ map dimension {map}")]
    GermDimensionMismatch { basis: usize, map: usize },
    #[error("coefficient vector length {len} is not divisible by d_x = {d_x}")]
    BadCoefficientLength { len: usize, d_x: usize },
    #[error("propagation diverged at step {step}: coefficient magnitude exceeded 1e9")]
    Diverged { step: usize },
    #[error("cost matrix must be symmetric")]
    NonSymmetricCost,
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Assignment of germ dimensions to noise channels and uncertain
/// initial-condition components.
#[derive(Debug, Clone)]
pub struct GermMap {
    /// Total germ dimension `d_xi`.
    pub dim: usize,
    channel_germ: Vec<Option<usize>>,
    initial_germ: Vec<Option<usize>>,
}

impl GermMap {
    /// Standard layout: noise channel `c` gets germ `c`, and the listed
    /// uncertain initial components get germs `d_w, d_w+1, ...` in order.
    pub fn standard(
        d_w: usize,
        d_x: usize,
        uncertain_initial: &[usize],
    ) -> Result<GermMap, ProjectionError> {
        let dim = d_w + uncertain_initial.len();
        if dim == 0 {
            return Err(ProjectionError::EmptyGermMap);
        }
        let mut initial_germ = vec![None; d_x];
        for (k, &comp) in uncertain_initial.iter().enumerate() {
            if comp >= d_x {
                return Err(ProjectionError::ComponentOutOfRange { comp, d_x });
            }
            if initial_germ[comp].is_some() {
                return Err(ProjectionError::DuplicateGerm { germ: d_w + k });
            }
            initial_germ[comp] = Some(d_w + k);
        }
        Ok(GermMap { dim, channel_germ: (0..d_w).map(Some).collect(), initial_germ })
    }

    pub fn channel_germ(&self, channel: usize) -> Option<usize> {
        self.channel_germ.get(channel).copied().flatten()
    }

    pub fn initial_germ(&self, comp: usize) -> Option<usize> {
        self.initial_germ.get(comp).copied().flatten()
    }
}

/// Coefficients of the gPC expansion, laid out state-major:
/// `coeffs[i*(l+1) + j]` is coefficient `j` of state component `i`, and the
/// `j = 0` entries are the componentwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcState {
    pub d_x: usize,
    pub coeffs: DVector<f64>,
}

impl GpcState {
    pub fn new(d_x: usize, coeffs: DVector<f64>) -> Result<GpcState, ProjectionError> {
        if d_x == 0 || coeffs.len() % d_x != 0 {
            return Err(ProjectionError::BadCoefficientLength { len: coeffs.len(), d_x });
        }
        Ok(GpcState { d_x, coeffs })
    }

    pub fn zeros(d_x: usize, terms: usize) -> GpcState {
        GpcState { d_x, coeffs: DVector::zeros(d_x * terms) }
    }

    /// Number of basis terms `l + 1`.
    pub fn terms(&self) -> usize {
        self.coeffs.len() / self.d_x
    }

    /// Coefficient block of state component `i`.
    pub fn component(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        let l = self.terms();
        self.coeffs.rows(i * l, l)
    }

    /// Componentwise mean (the `j = 0` coefficients).
    pub fn mean(&self) -> DVector<f64> {
        let l = self.terms();
        DVector::from_fn(self.d_x, |i, _| self.coeffs[i * l])
    }

    fn is_finite_bounded(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite() && v.abs() <= 1e9)
    }

    /// Coefficients as a `d_x x (l+1)` matrix, rows = state components.
    fn as_matrix(&self) -> DMatrix<f64> {
        let l = self.terms();
        DMatrix::from_fn(self.d_x, l, |i, j| self.coeffs[i * l + j])
    }
}

/// The projected deterministic surrogate of an SDE: evaluators for the
/// Galerkin drift and diffusion coefficient dynamics, immutable and shareable
/// across threads.
pub struct ProjectedDynamics {
    pub model: Arc<SdeModel>,
    pub basis: Arc<HermiteBasis>,
    pub rule: Arc<QuadratureRule>,
    pub germ_map: GermMap,
    /// Basis values at the quadrature nodes, `nodes x (l+1)`.
    phi: DMatrix<f64>,
    /// Projection weights `projt[k, j] = w_k phi_j(n_k) / <phi_j^2>`.
    projt: DMatrix<f64>,
    /// `germ_factor[c][k] = (n_k)_{germ(c)}`, the germ value of channel `c`.
    germ_factor: Vec<DVector<f64>>,
}

impl std::fmt::Debug for ProjectedDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectedDynamics")
            .field("model", &self.model)
            .field("terms", &self.basis.len())
            .field("nodes", &self.rule.nodes.len())
            .finish_non_exhaustive()
    }
}

/// Builds the Galerkin projection of `model` by stochastic collocation on
/// `rule`. The rule should be exact to degree `2 p_gpc + drift degree`;
/// lower-order rules silently incur quadrature error.
pub fn project_dynamics(
    model: Arc<SdeModel>,
    basis: Arc<HermiteBasis>,
    rule: Arc<QuadratureRule>,
    germ_map: GermMap,
) -> Result<ProjectedDynamics, ProjectionError> {
    if basis.dim != germ_map.dim {
        return Err(ProjectionError::GermDimensionMismatch { basis: basis.dim, map: germ_map.dim });
    }
    let phi = basis.eval_at_nodes(&rule)?;
    let projt = DMatrix::from_fn(rule.nodes.len(), basis.len(), |k, j| {
        rule.weights[k] * phi[(k, j)] / basis.norms_sq[j]
    });
    let mut germ_factor = Vec::with_capacity(model.d_w);
    for c in 0..model.d_w {
        let germ = germ_map
            .channel_germ(c)
            .ok_or(ProjectionError::UnassignedChannel { channel: c })?;
        if germ >= germ_map.dim {
            return Err(ProjectionError::GermOutOfRange { germ, dim: germ_map.dim });
        }
        germ_factor.push(DVector::from_fn(rule.nodes.len(), |k, _| rule.nodes[k][germ]));
    }
    Ok(ProjectedDynamics { model, basis, rule, germ_map, phi, projt, germ_factor })
}

impl ProjectedDynamics {
    pub fn terms(&self) -> usize {
        self.basis.len()
    }

    /// Realized states at the quadrature nodes, `d_x x nodes`.
    fn states_at_nodes(&self, x: &GpcState) -> DMatrix<f64> {
        x.as_matrix() * self.phi.transpose()
    }

    fn project_node_values(&self, values: &DMatrix<f64>) -> GpcState {
        let mat = values * &self.projt;
        let l = self.basis.len();
        let mut coeffs = DVector::zeros(self.model.d_x * l);
        for i in 0..self.model.d_x {
            for j in 0..l {
                coeffs[i * l + j] = mat[(i, j)];
            }
        }
        GpcState { d_x: self.model.d_x, coeffs }
    }

    /// Projected drift coefficients `f_bar(X, u)`.
    pub fn f_bar(&self, x: &GpcState, u: &DVector<f64>) -> GpcState {
        let states = self.states_at_nodes(x);
        let mut values = DMatrix::zeros(self.model.d_x, self.rule.nodes.len());
        for k in 0..self.rule.nodes.len() {
            values.set_column(k, &self.model.drift(&states.column(k).into_owned(), u));
        }
        self.project_node_values(&values)
    }

    /// Projected diffusion coefficients `g_bar(X, u)`: each channel's column
    /// is multiplied by its germ value before projecting.
    pub fn g_bar(&self, x: &GpcState, u: &DVector<f64>) -> GpcState {
        let states = self.states_at_nodes(x);
        let mut values = DMatrix::zeros(self.model.d_x, self.rule.nodes.len());
        for k in 0..self.rule.nodes.len() {
            let g = self.model.diffusion(&states.column(k).into_owned(), u);
            let mut col = DVector::zeros(self.model.d_x);
            for (c, factor) in self.germ_factor.iter().enumerate() {
                col += g.column(c) * factor[k];
            }
            values.set_column(k, &col);
        }
        self.project_node_values(&values)
    }

    /// One-step coefficient increment `f_bar dt + g_bar sqrt(dt)`.
    pub fn increment(&self, x: &GpcState, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let f = self.f_bar(x, u);
        let g = self.g_bar(x, u);
        f.coeffs * dt + g.coeffs * dt.sqrt()
    }

    /// One forward-Euler step of the projected system.
    pub fn step(&self, x: &GpcState, u: &DVector<f64>, dt: f64) -> GpcState {
        GpcState { d_x: x.d_x, coeffs: &x.coeffs + self.increment(x, u, dt) }
    }
}

/// Projects an initial condition with independent componentwise uncertainty:
/// means in the `j = 0` slots, each nonzero stdev in the first-order
/// coefficient of its assigned germ dimension.
pub fn project_initial(
    mean: &DVector<f64>,
    stdev: &DVector<f64>,
    basis: &HermiteBasis,
    germ_map: &GermMap,
) -> Result<GpcState, ProjectionError> {
    assert_eq!(mean.len(), stdev.len());
    assert!(stdev.iter().all(|s| *s >= 0.0), "stdev must be nonnegative");
    let d_x = mean.len();
    let l = basis.len();
    let mut coeffs = DVector::zeros(d_x * l);
    for i in 0..d_x {
        coeffs[i * l] = mean[i];
        if stdev[i] > 0.0 {
            let germ =
                germ_map.initial_germ(i).ok_or(ProjectionError::UnassignedInitial { comp: i })?;
            if germ >= basis.dim {
                return Err(ProjectionError::GermOutOfRange { germ, dim: basis.dim });
            }
            coeffs[i * l + basis.linear_index(germ)] = stdev[i];
        }
    }
    Ok(GpcState { d_x, coeffs })
}

/// Propagates the projected system over a control sequence; returns the
/// trajectory including the initial state (`controls.len() + 1` entries).
pub fn propagate_gpc(
    pd: &ProjectedDynamics,
    x0: &GpcState,
    controls: &[DVector<f64>],
    dt: f64,
) -> Result<Vec<GpcState>, ProjectionError> {
    assert!(dt > 0.0, "dt must be positive");
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = pd.step(out.last().expect("nonempty"), u, dt);
        if !next.is_finite_bounded() {
            return Err(ProjectionError::Diverged { step: k });
        }
        out.push(next);
    }
    Ok(out)
}

/// Mean and covariance implied by the expansion: `mean_i = x_{i,0}` and
/// `cov_{ii'} = sum_{j>=1} x_{i,j} x_{i',j} <phi_j^2>`.
pub fn moments_from_gpc(x: &GpcState, basis: &HermiteBasis) -> (DVector<f64>, DMatrix<f64>) {
    let l = basis.len();
    debug_assert_eq!(x.terms(), l);
    let mean = x.mean();
    let mut cov = DMatrix::zeros(x.d_x, x.d_x);
    for i in 0..x.d_x {
        for ip in 0..=i {
            let mut acc = 0.0;
            for j in 1..l {
                acc += x.coeffs[i * l + j] * x.coeffs[ip * l + j] * basis.norms_sq[j];
            }
            cov[(i, ip)] = acc;
            cov[(ip, i)] = acc;
        }
    }
    (mean, cov)
}

/// Realizes the expansion at a germ sample: `x_i = sum_j x_{i,j} phi_j(xi)`.
pub fn sample_reconstruct(x: &GpcState, basis: &HermiteBasis, xi: &DVector<f64>) -> DVector<f64> {
    let l = basis.len();
    debug_assert_eq!(x.terms(), l);
    let phi = basis.eval_all(xi);
    DVector::from_fn(x.d_x, |i, _| {
        (0..l).map(|j| x.coeffs[i * l + j] * phi[j]).sum()
    })
}

/// Lifts a quadratic state cost into coefficient space:
/// `E[x' Q x]`-consistent block matrix with `(i, i')` block
/// `Q_{ii'} diag(<phi_0^2>, ..., <phi_l^2>)`. Since every squared norm is at
/// least one, the spectrum only moves up from `Q`'s.
pub fn project_cost_matrix(
    q: &DMatrix<f64>,
    basis: &HermiteBasis,
) -> Result<DMatrix<f64>, ProjectionError> {
    let d_x = q.nrows();
    let scale = q.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if q.ncols() != d_x || (q - q.transpose()).abs().max() > 1e-12 * (1.0 + scale) {
        return Err(ProjectionError::NonSymmetricCost);
    }
    let l = basis.len();
    let mut out = DMatrix::zeros(d_x * l, d_x * l);
    for i in 0..d_x {
        for ip in 0..d_x {
            for j in 0..l {
                out[(i * l + j, ip * l + j)] = q[(i, ip)] * basis.norms_sq[j];
            }
        }
    }
    Ok(out)
}

/// First-order model of the step increment at a nominal point:
/// `A = d(f_bar dt + g_bar sqrt(dt))/dX`, `B = d(.)/du`, and
/// `Z = increment(nominal) - A X_nom - B u_nom`, so the affine model is exact
/// at the nominal. Jacobians are assembled by the quadrature chain rule from
/// the model's drift/diffusion Jacobians.
pub fn linearize_projected(
    pd: &ProjectedDynamics,
    x_nom: &GpcState,
    u_nom: &DVector<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    assert!(
        x_nom.coeffs.iter().all(|v| v.is_finite()) && u_nom.iter().all(|v| v.is_finite()),
        "nominal point must be finite"
    );
    let d_x = pd.model.d_x;
    let d_u = pd.model.d_u;
    let l = pd.basis.len();
    let n = d_x * l;
    let sqrt_dt = dt.sqrt();
    let states = pd.states_at_nodes(x_nom);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, d_u);
    for k in 0..pd.rule.nodes.len() {
        let xk = states.column(k).into_owned();
        let (jfx, jfu) = pd.model.drift_jacobian(&xk, u_nom);
        let mut jx = jfx * dt;
        let mut ju = jfu * dt;
        for (c, factor) in pd.germ_factor.iter().enumerate() {
            let (jgx, jgu) = pd.model.diffusion_jacobian(&xk, u_nom, c);
            jx += jgx * (factor[k] * sqrt_dt);
            ju += jgu * (factor[k] * sqrt_dt);
        }
        // outer product phi-block: m[j, j'] = w_k phi_j/norm_j * phi_{j'}
        let proj_col = pd.projt.row(k).transpose();
        let phi_row = pd.phi.row(k);
        let m = &proj_col * phi_row;
        a += jx.kronecker(&m);
        b += ju.kronecker(&proj_col);
    }
    let z = pd.increment(x_nom, u_nom, dt) - &a * &x_nom.coeffs - &b * u_nom;
    (a, b, z)
}
