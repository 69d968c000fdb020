//! Deterministic convex surrogates of chance constraints: distributionally
//! robust and Gaussian tightening of linear constraints, conservative
//! quadratic (trace) constraints, collision half-spaces for deterministic and
//! stochastic obstacles, terminal sets, and uniform risk allocation — in both
//! moment space and gPC coefficient space.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erf_inv;
use thiserror::Error;

use crate::basis::HermiteBasis;
use crate::projection::GpcState;

/// Risks outside this range either void the bounds or blow up the
/// tightening factor.
pub const RISK_MIN: f64 = 0.001;
pub const RISK_MAX: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("risk {eps} outside [{RISK_MIN}, {RISK_MAX}]")]
    RiskOutOfRange { eps: f64 },
    #[error("tightening factor undefined for risk {eps}")]
    TighteningUndefined { eps: f64 },
    #[error("constraint normal must be nonzero")]
    ZeroNormal,
    #[error("quadratic weight matrix must be symmetric PSD")]
    NotPsd,
    #[error("scale parameter must be positive")]
    NonPositiveScale,
    #[error("obstacle radius must be positive")]
    NonPositiveRadius,
    #[error("linearization point coincides with the obstacle center")]
    DegenerateNominal,
    #[error("quadratic weights must be nonnegative")]
    NegativeWeight,
    #[error("only diagonal terminal variance weights are supported")]
    NonDiagonalTerminal,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

fn check_risk(eps: f64) -> Result<f64, ConstraintError> {
    if !(RISK_MIN..=RISK_MAX).contains(&eps) {
        return Err(ConstraintError::RiskOutOfRange { eps });
    }
    Ok(eps)
}

/// Which concentration bound converts a risk level into a tightening factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TighteningBound {
    /// Valid for any distribution with the given first two moments.
    DistributionallyRobust,
    /// Exact for Gaussian states; tighter, but not robust.
    Gaussian,
}

/// `sqrt((1 - eps)/eps)`: the distribution-free (Cantelli) multiplier on the
/// constraint-direction standard deviation.
pub fn dr_tightening(eps: f64) -> Result<f64, ConstraintError> {
    if eps <= 0.0 || eps >= 1.0 {
        return Err(ConstraintError::TighteningUndefined { eps });
    }
    Ok(((1.0 - eps) / eps).sqrt())
}

/// `sqrt(2) erf^-1(1 - 2 eps)`: the standard normal `(1-eps)`-quantile.
pub fn gaussian_tightening(eps: f64) -> Result<f64, ConstraintError> {
    if eps <= 0.0 || eps >= 0.5 {
        return Err(ConstraintError::TighteningUndefined { eps });
    }
    Ok(std::f64::consts::SQRT_2 * erf_inv(1.0 - 2.0 * eps))
}

pub fn tightening(eps: f64, bound: TighteningBound) -> Result<f64, ConstraintError> {
    match bound {
        TighteningBound::DistributionallyRobust => dr_tightening(eps),
        TighteningBound::Gaussian => gaussian_tightening(eps),
    }
}

/// `Pr(a'x + b <= 0) >= 1 - eps` on a linear functional of the state.
#[derive(Debug, Clone)]
pub struct LinearChance {
    pub a: DVector<f64>,
    pub b: f64,
    pub eps: f64,
}

impl LinearChance {
    pub fn new(a: DVector<f64>, b: f64, eps: f64) -> Result<LinearChance, ConstraintError> {
        if a.iter().all(|v| *v == 0.0) {
            return Err(ConstraintError::ZeroNormal);
        }
        Ok(LinearChance { a, b, eps: check_risk(eps)? })
    }
}

/// `Pr((x - mu)' q (x - mu) >= c) <= eps` via the trace bound.
#[derive(Debug, Clone)]
pub struct QuadChance {
    pub q: DMatrix<f64>,
    pub c: f64,
    pub eps: f64,
}

impl QuadChance {
    pub fn new(q: DMatrix<f64>, c: f64, eps: f64) -> Result<QuadChance, ConstraintError> {
        if c <= 0.0 {
            return Err(ConstraintError::NonPositiveScale);
        }
        check_symmetric_psd(&q)?;
        Ok(QuadChance { q, c, eps: check_risk(eps)? })
    }
}

fn check_symmetric_psd(q: &DMatrix<f64>) -> Result<(), ConstraintError> {
    let scale = q.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if q.nrows() != q.ncols() || (q - q.transpose()).abs().max() > 1e-10 * (1.0 + scale) {
        return Err(ConstraintError::NotPsd);
    }
    let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-10 * (1.0 + scale) {
        return Err(ConstraintError::NotPsd);
    }
    Ok(())
}

/// Spherical obstacle with (possibly) uncertain center.
#[derive(Debug, Clone)]
pub struct Obstacle {
    pub center_mean: DVector<f64>,
    pub center_cov: DMatrix<f64>,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(
        center_mean: DVector<f64>,
        center_cov: DMatrix<f64>,
        radius: f64,
    ) -> Result<Obstacle, ConstraintError> {
        if radius <= 0.0 {
            return Err(ConstraintError::NonPositiveRadius);
        }
        if center_cov.nrows() != center_mean.len() {
            return Err(ConstraintError::DimensionMismatch {
                expected: center_mean.len(),
                got: center_cov.nrows(),
            });
        }
        check_symmetric_psd(&center_cov)?;
        Ok(Obstacle { center_mean, center_cov, radius })
    }

    pub fn deterministic(center: DVector<f64>, radius: f64) -> Result<Obstacle, ConstraintError> {
        let d = center.len();
        Obstacle::new(center, DMatrix::zeros(d, d), radius)
    }
}

/// Evaluates `a' mu + b + kappa(eps) sqrt(a' Sigma a)`; nonpositive means the
/// chance constraint holds under the chosen bound.
pub fn drlcc_moment_check(
    lc: &LinearChance,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    bound: TighteningBound,
) -> Result<f64, ConstraintError> {
    let kappa = tightening(lc.eps, bound)?;
    let var = (cov * &lc.a).dot(&lc.a).max(0.0);
    Ok(lc.a.dot(mean) + lc.b + kappa * var.sqrt())
}

/// Trace surrogate of the quadratic chance constraint:
/// `tr(q cov)/c - eps`, nonpositive when feasible.
pub fn cqcc_check(qc: &QuadChance, cov: &DMatrix<f64>) -> f64 {
    (&qc.q * cov).trace() / qc.c - qc.eps
}

/// Shifted variant for a quadratic form around the origin rather than the
/// mean: `(tr(A cov) + mean' A mean)/c - eps`.
pub fn shifted_cqcc_check(
    a: &DMatrix<f64>,
    c: f64,
    eps: f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64, ConstraintError> {
    if c <= 0.0 {
        return Err(ConstraintError::NonPositiveScale);
    }
    check_symmetric_psd(a)?;
    Ok(((a * cov).trace() + (a * mean).dot(mean)) / c - check_risk(eps)?)
}

/// Uniform Bonferroni split of a joint risk budget over `m` constraints.
pub fn allocate_risk(eps: f64, m: usize) -> Vec<f64> {
    assert!(m >= 1, "need at least one constraint");
    vec![eps / m as f64; m]
}

/// Second-order cone form of a tightened linear chance constraint in gPC
/// coordinates: feasible iff `lin_row . X + offset + scale ||cone_matrix X|| <= 0`.
#[derive(Debug, Clone)]
pub struct SocGpcConstraint {
    pub lin_row: DVector<f64>,
    pub offset: f64,
    pub cone_matrix: DMatrix<f64>,
    pub scale: f64,
}

impl SocGpcConstraint {
    pub fn margin(&self, x: &GpcState) -> f64 {
        self.lin_row.dot(&x.coeffs) + self.offset + self.scale * (&self.cone_matrix * &x.coeffs).norm()
    }
}

/// Lifts a linear chance constraint into gPC coordinates with an explicit
/// tightening bound: the mean row is `a` on the `j = 0` slots and the cone
/// matrix is `H (a' (x) I)` with `H = diag(0, sqrt(<phi_1^2>), ...)`, so the
/// cone norm reproduces `sqrt(a' Sigma a)` exactly.
pub fn to_gpc_soc_with(
    lc: &LinearChance,
    basis: &HermiteBasis,
    bound: TighteningBound,
) -> Result<SocGpcConstraint, ConstraintError> {
    let d_x = lc.a.len();
    let l = basis.len();
    let mut lin_row = DVector::zeros(d_x * l);
    for i in 0..d_x {
        lin_row[i * l] = lc.a[i];
    }
    let mut cone_matrix = DMatrix::zeros(l, d_x * l);
    for j in 1..l {
        let h = basis.norms_sq[j].sqrt();
        for i in 0..d_x {
            cone_matrix[(j, i * l + j)] = h * lc.a[i];
        }
    }
    Ok(SocGpcConstraint { lin_row, offset: lc.b, cone_matrix, scale: tightening(lc.eps, bound)? })
}

/// [`to_gpc_soc_with`] under the distributionally robust bound.
pub fn to_gpc_soc(lc: &LinearChance, basis: &HermiteBasis) -> Result<SocGpcConstraint, ConstraintError> {
    to_gpc_soc_with(lc, basis, TighteningBound::DistributionallyRobust)
}

/// Diagonal quadratic (trace) chance constraint in gPC coordinates:
/// `sum_i sum_{j>=1} a_i <phi_j^2> x_ij^2 <= eps c`.
#[derive(Debug, Clone)]
pub struct GpcQuadratic {
    /// Per-coefficient weights `a_i <phi_j^2>`; zero on the mean slots.
    pub weights: DVector<f64>,
    pub c: f64,
    pub eps: f64,
}

impl GpcQuadratic {
    /// `sum w x^2 / c - eps`; nonpositive when feasible.
    pub fn margin(&self, x: &GpcState) -> f64 {
        let q: f64 = self.weights.iter().zip(x.coeffs.iter()).map(|(w, v)| w * v * v).sum();
        q / self.c - self.eps
    }
}

pub fn to_gpc_quadratic(
    a_diag: &DVector<f64>,
    c: f64,
    eps: f64,
    basis: &HermiteBasis,
) -> Result<GpcQuadratic, ConstraintError> {
    if a_diag.iter().any(|v| *v < 0.0) {
        return Err(ConstraintError::NegativeWeight);
    }
    if c <= 0.0 {
        return Err(ConstraintError::NonPositiveScale);
    }
    let l = basis.len();
    let mut weights = DVector::zeros(a_diag.len() * l);
    for i in 0..a_diag.len() {
        for j in 1..l {
            weights[i * l + j] = a_diag[i] * basis.norms_sq[j];
        }
    }
    Ok(GpcQuadratic { weights, c, eps: check_risk(eps)? })
}

/// Supporting half-space of the safety ball around a deterministic obstacle,
/// linearized at `x_nom` (position coordinates): returns `(a, b)` with
/// `a'x + b <= 0` iff the component of `x - center` along the nominal
/// direction is at least `r_rob + radius`.
pub fn det_obstacle_halfspace(
    x_nom: &DVector<f64>,
    obs: &Obstacle,
    r_rob: f64,
) -> Result<(DVector<f64>, f64), ConstraintError> {
    let diff = x_nom - &obs.center_mean;
    let dist = diff.norm();
    if dist <= 1e-12 {
        return Err(ConstraintError::DegenerateNominal);
    }
    let r_safe = r_rob + obs.radius;
    let a = -diff.clone();
    let b = diff.dot(&obs.center_mean) + r_safe * dist;
    Ok((a, b))
}

/// Tightened half-space for an obstacle with uncertain center: the obstacle
/// covariance (and any robot-obstacle cross covariance) enters the cone term
/// as a constant variance added to the robot's own directional variance.
#[derive(Debug, Clone)]
pub struct StochasticHalfspace {
    pub a: DVector<f64>,
    pub b: f64,
    pub kappa: f64,
    /// `a'(Sigma_p + 2 Sigma_xp) a`, the state-independent variance under the root.
    pub extra_var: f64,
    /// Margin evaluated at the nominal with the supplied robot covariance.
    pub value: f64,
}

impl StochasticHalfspace {
    /// `a' mean + b + kappa sqrt(robot_var + extra_var)` where `robot_var` is
    /// the robot position variance along `a`.
    pub fn margin(&self, mean_pos: &DVector<f64>, robot_var: f64) -> f64 {
        self.a.dot(mean_pos) + self.b + self.kappa * (robot_var.max(0.0) + self.extra_var).sqrt()
    }
}

pub fn stoch_obstacle_surrogate(
    x_nom: &DVector<f64>,
    obs: &Obstacle,
    r_rob: f64,
    eps: f64,
    robot_cov: &DMatrix<f64>,
    cross_cov: Option<&DMatrix<f64>>,
) -> Result<StochasticHalfspace, ConstraintError> {
    let kappa = dr_tightening(check_risk(eps)?)?;
    let (a, b) = det_obstacle_halfspace(x_nom, obs, r_rob)?;
    let mut extra_var = (&obs.center_cov * &a).dot(&a);
    if let Some(sxp) = cross_cov {
        extra_var += 2.0 * (sxp * &a).dot(&a);
    }
    let extra_var = extra_var.max(0.0);
    let robot_var = (robot_cov * &a).dot(&a).max(0.0);
    let value = a.dot(x_nom) + b + kappa * (robot_var + extra_var).sqrt();
    Ok(StochasticHalfspace { a, b, kappa, extra_var, value })
}

/// Terminal specification. With `pin_mean` the mean is fixed to `xf_mean`
/// (equalities on the `j = 0` slots) and only the variance trace is budgeted;
/// without it the full expected quadratic `E[(x - xf)' Q (x - xf)]`, mean
/// offset included, shares the same budget, intended to be slack-relaxed by
/// the optimizer.
#[derive(Debug, Clone)]
pub struct TerminalSpec {
    pub xf_mean: DVector<f64>,
    /// Diagonal of the terminal quadratic, kept for the mean-offset rows.
    pub q_diag: DVector<f64>,
    pub variance: GpcQuadratic,
    pub pin_mean: bool,
}

impl TerminalSpec {
    /// Coefficient-index/value pairs pinning the mean slots.
    pub fn mean_rows(&self, l: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.xf_mean.iter().enumerate().map(move |(i, &v)| (i * l, v))
    }

    /// Release the mean equalities; the mean offset then counts against the
    /// quadratic budget instead.
    pub fn soft_mean(mut self) -> Self {
        self.pin_mean = false;
        self
    }

    /// `E[(x - xf)' Q (x - xf)] / c - eps` for a gPC state; the mean offset
    /// term is dropped while the mean is pinned.
    pub fn margin(&self, x: &GpcState, l: usize) -> f64 {
        let mut q = 0.0;
        if !self.pin_mean {
            for (i, &w) in self.q_diag.iter().enumerate() {
                let dev = x.coeffs[i * l] - self.xf_mean[i];
                q += w * dev * dev;
            }
        }
        q / self.variance.c + self.variance.margin(x)
    }
}

pub fn terminal_constraints(
    xf_mean: &DVector<f64>,
    q_xf: &DMatrix<f64>,
    c_f: f64,
    eps_f: f64,
    basis: &HermiteBasis,
) -> Result<TerminalSpec, ConstraintError> {
    check_symmetric_psd(q_xf)?;
    let scale = q_xf.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..q_xf.nrows() {
        for j in 0..q_xf.ncols() {
            if i != j && q_xf[(i, j)].abs() > 1e-12 * (1.0 + scale) {
                return Err(ConstraintError::NonDiagonalTerminal);
            }
        }
    }
    let a_diag = q_xf.diagonal();
    Ok(TerminalSpec {
        xf_mean: xf_mean.clone(),
        variance: to_gpc_quadratic(&a_diag, c_f, eps_f, basis)?,
        q_diag: a_diag,
        pin_mean: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::projection::moments_from_gpc;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.05
    }

    #[test]
    fn tightening_worked_values() {
        assert_relative_eq!(dr_tightening(0.5).unwrap(), 1.0);
        assert_relative_eq!(dr_tightening(0.05).unwrap(), 19f64.sqrt(), epsilon = 1e-12);
        assert!(dr_tightening(0.0).is_err());
        assert!(dr_tightening(1.0).is_err());
        // standard normal quantiles: two-sigma and one-sigma tail masses
        assert_abs_diff_eq!(gaussian_tightening(0.02275).unwrap(), 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(gaussian_tightening(0.1587).unwrap(), 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(gaussian_tightening(0.4999).unwrap(), 0.0, epsilon = 1e-3);
        assert!(gaussian_tightening(0.5).is_err());
        assert!(gaussian_tightening(-0.1).is_err());
    }

    #[test]
    fn dr_dominates_gaussian_on_grid() {
        for k in 0..500 {
            let eps = 0.001 + (0.499 - 0.001) * k as f64 / 499.0;
            let dr = dr_tightening(eps).unwrap();
            let g = gaussian_tightening(eps).unwrap();
            assert!(dr > g, "eps={eps}: dr={dr} <= gaussian={g}");
        }
    }

    #[test]
    fn risk_clamp_on_constructors() {
        let a = DVector::from_vec(vec![1.0]);
        assert!(LinearChance::new(a.clone(), 0.0, 0.0005).is_err());
        assert!(LinearChance::new(a.clone(), 0.0, 0.6).is_err());
        assert!(LinearChance::new(a.clone(), 0.0, 0.001).is_ok());
        assert!(LinearChance::new(a.clone(), 0.0, 0.5).is_ok());
        assert!(LinearChance::new(DVector::zeros(2), 0.0, 0.1).is_err());
        assert!(QuadChance::new(DMatrix::identity(2, 2), -1.0, 0.1).is_err());
        assert!(QuadChance::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, -1.0]), 1.0, 0.1)
            .is_err());
    }

    #[test]
    fn moment_check_worked_values() {
        // zero covariance reduces to the deterministic margin
        let lc = LinearChance::new(DVector::from_vec(vec![2.0]), -1.0, 0.1).unwrap();
        let m = drlcc_moment_check(
            &lc,
            &DVector::from_vec(vec![0.3]),
            &DMatrix::zeros(1, 1),
            TighteningBound::DistributionallyRobust,
        )
        .unwrap();
        assert_relative_eq!(m, -0.4, epsilon = 1e-14);
        // a=[1], b=-3, mu=0, Sigma=1, eps=0.5 -> 0 - 3 + 1*1 = -2
        let lc = LinearChance::new(DVector::from_vec(vec![1.0]), -3.0, 0.5).unwrap();
        let m = drlcc_moment_check(
            &lc,
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            TighteningBound::DistributionallyRobust,
        )
        .unwrap();
        assert_relative_eq!(m, -2.0, epsilon = 1e-14);
    }

    #[test]
    fn feasible_margin_bounds_gaussian_violation() {
        // Lemma-1-style subset check: margins tightened to exactly zero, then
        // the empirical violation over Gaussian samples must stay below eps
        // (plus binomial noise); the DR bound is strictly conservative there.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        for case in 0..5 {
            let d = 2 + case % 2;
            let eps = [0.05, 0.1, 0.2, 0.3, 0.45][case];
            let a = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let mean = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let cov = random_psd(&mut rng, d);
            let chol = cov.clone().cholesky().unwrap();
            for bound in [TighteningBound::Gaussian, TighteningBound::DistributionallyRobust] {
                let kappa = tightening(eps, bound).unwrap();
                let sd = (&cov * &a).dot(&a).sqrt();
                let b = -a.dot(&mean) - kappa * sd;
                let lc = LinearChance::new(a.clone(), b, eps).unwrap();
                let margin = drlcc_moment_check(&lc, &mean, &cov, bound).unwrap();
                assert_abs_diff_eq!(margin, 0.0, epsilon = 1e-10);
                let mut violations = 0usize;
                for _ in 0..n {
                    let z = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
                    let x = &mean + chol.l() * z;
                    if a.dot(&x) + b > 0.0 {
                        violations += 1;
                    }
                }
                let rate = violations as f64 / n as f64;
                let se = (eps * (1.0 - eps) / n as f64).sqrt();
                assert!(
                    rate <= eps + 3.0 * se,
                    "case {case} {bound:?}: rate {rate} > eps {eps} + 3se"
                );
            }
        }
    }

    #[test]
    fn cqcc_worked_values_and_sampling() {
        // cov = 0 -> -eps
        let qc = QuadChance::new(DMatrix::identity(2, 2), 1.0, 0.05).unwrap();
        assert_relative_eq!(cqcc_check(&qc, &DMatrix::zeros(2, 2)), -0.05);
        // q=I2, cov=diag(0.01,0.01), c=1, eps=0.05 -> 0.02 - 0.05
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01]));
        assert_relative_eq!(cqcc_check(&qc, &cov), -0.03, epsilon = 1e-14);
        // shifted: mean=0 reduces to cqcc_check
        let m0 = shifted_cqcc_check(&qc.q, 1.0, 0.05, &DVector::zeros(2), &cov).unwrap();
        assert_relative_eq!(m0, cqcc_check(&qc, &cov), epsilon = 1e-14);
        // A=1, mean=1, cov=0, c=10, eps=0.2 -> 0.1 - 0.2
        let m = shifted_cqcc_check(
            &DMatrix::identity(1, 1),
            10.0,
            0.2,
            &DVector::from_element(1, 1.0),
            &DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert_relative_eq!(m, -0.1, epsilon = 1e-14);
    }

    #[test]
    fn feasible_cqcc_bounds_violation_for_gaussian_and_mixture() {
        // Markov-type subset check on tight instances: Pr((x-mu)'q(x-mu) >= c)
        // <= eps for any distribution with the matched moments; exercised on
        // a Gaussian and a two-point Gaussian mixture with the same (mu, Sigma).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        for case in 0..4 {
            let d = 2;
            let eps = [0.05, 0.1, 0.2, 0.3][case];
            let q = random_psd(&mut rng, d);
            let cov = random_psd(&mut rng, d);
            let mean = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let c = (&q * &cov).trace() / eps; // margin exactly zero
            let qc = QuadChance::new(q.clone(), c, eps).unwrap();
            assert_abs_diff_eq!(cqcc_check(&qc, &cov), 0.0, epsilon = 1e-12);
            let chol = cov.clone().cholesky().unwrap();
            // mixture components mu +/- delta with cov Sigma - delta delta'
            let delta = chol.l().column(0) * 0.5;
            let comp_cov = &cov - &delta * delta.transpose();
            let comp_chol = comp_cov.cholesky().unwrap();
            for mixture in [false, true] {
                let mut violations = 0usize;
                for _ in 0..n {
                    let z = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
                    let x = if mixture {
                        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                        &mean + &delta * sign + comp_chol.l() * z
                    } else {
                        &mean + chol.l() * z
                    };
                    let e = &x - &mean;
                    if (&q * &e).dot(&e) >= c {
                        violations += 1;
                    }
                }
                let rate = violations as f64 / n as f64;
                let se = (eps * (1.0 - eps) / n as f64).sqrt();
                assert!(rate <= eps + 3.0 * se, "case {case} mixture={mixture}: {rate} > {eps}");
            }
        }
    }

    #[test]
    fn risk_allocation_is_uniform_and_sums_back() {
        assert_eq!(allocate_risk(0.05, 1), vec![0.05]);
        let split = allocate_risk(0.05, 5);
        assert_eq!(split.len(), 5);
        for r in &split {
            assert_relative_eq!(*r, 0.01);
        }
        assert_abs_diff_eq!(split.iter().sum::<f64>(), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn gpc_soc_structure_matches_worked_example() {
        // 1D, P=2: mean row a [1,0,0]; cone matrix a diag(0, 1, sqrt 2)
        let basis = build_basis(1, 2).unwrap();
        let lc = LinearChance::new(DVector::from_vec(vec![1.5]), -0.2, 0.05).unwrap();
        let soc = to_gpc_soc(&lc, &basis).unwrap();
        assert_eq!(soc.lin_row.as_slice(), &[1.5, 0.0, 0.0]);
        assert_relative_eq!(soc.offset, -0.2);
        assert_relative_eq!(soc.scale, 19f64.sqrt(), epsilon = 1e-12);
        assert_eq!(soc.cone_matrix.shape(), (3, 3));
        assert_abs_diff_eq!(soc.cone_matrix.row(0).norm(), 0.0);
        assert_relative_eq!(soc.cone_matrix[(1, 1)], 1.5);
        assert_relative_eq!(soc.cone_matrix[(2, 2)], 1.5 * 2f64.sqrt(), epsilon = 1e-14);
        // a = e_i selects only block i
        let basis1 = build_basis(1, 1).unwrap();
        let lc = LinearChance::new(DVector::from_vec(vec![0.0, 1.0]), 0.0, 0.1).unwrap();
        let soc = to_gpc_soc(&lc, &basis1).unwrap();
        assert_eq!(soc.lin_row.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        for col in 0..2 {
            assert_abs_diff_eq!(soc.cone_matrix.column(col).norm(), 0.0);
        }
    }

    #[test]
    fn gpc_soc_margin_equals_moment_margin() {
        // Lemma-6 equivalence on 100 random states: the cone norm reproduces
        // sqrt(a' Sigma a) through the orthogonality weights
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = build_basis(2, 2).unwrap();
        let d_x = 2;
        let l = basis.len();
        for _ in 0..100 {
            let a = DVector::from_fn(d_x, |_, _| rng.gen_range(-2.0..2.0));
            if a.norm() < 1e-6 {
                continue;
            }
            let eps = rng.gen_range(0.01..0.5);
            let b = rng.gen_range(-1.0..1.0);
            let lc = LinearChance::new(a, b, eps).unwrap();
            let soc = to_gpc_soc(&lc, &basis).unwrap();
            let x = GpcState::new(d_x, DVector::from_fn(d_x * l, |_, _| rng.gen_range(-1.0..1.0)))
                .unwrap();
            let (mean, cov) = moments_from_gpc(&x, &basis);
            let want = drlcc_moment_check(&lc, &mean, &cov, TighteningBound::DistributionallyRobust)
                .unwrap();
            assert_abs_diff_eq!(soc.margin(&x), want, epsilon = 1e-8);
        }
    }

    #[test]
    fn gpc_quadratic_weights_and_equivalence() {
        let basis = build_basis(1, 2).unwrap();
        let gq = to_gpc_quadratic(&DVector::from_element(1, 0.7), 1.0, 0.05, &basis).unwrap();
        assert_eq!(gq.weights.len(), 3);
        assert_abs_diff_eq!(gq.weights[0], 0.0);
        assert_relative_eq!(gq.weights[1], 0.7);
        assert_relative_eq!(gq.weights[2], 1.4);
        // zero weights: always feasible at -eps
        let zero = to_gpc_quadratic(&DVector::zeros(1), 1.0, 0.05, &basis).unwrap();
        let x = GpcState::new(1, DVector::from_vec(vec![5.0, 5.0, 5.0])).unwrap();
        assert_relative_eq!(zero.margin(&x), -0.05);
        assert!(to_gpc_quadratic(&DVector::from_element(1, -0.1), 1.0, 0.05, &basis).is_err());
        // trace equivalence on random states
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis2 = build_basis(2, 2).unwrap();
        let l = basis2.len();
        for _ in 0..50 {
            let a_diag = DVector::from_fn(2, |_, _| rng.gen_range(0.0..2.0));
            let c = rng.gen_range(0.1..3.0);
            let eps = rng.gen_range(0.01..0.5);
            let gq = to_gpc_quadratic(&a_diag, c, eps, &basis2).unwrap();
            let x = GpcState::new(2, DVector::from_fn(2 * l, |_, _| rng.gen_range(-1.0..1.0)))
                .unwrap();
            let (_, cov) = moments_from_gpc(&x, &basis2);
            let want = (DMatrix::from_diagonal(&a_diag) * cov).trace() / c - eps;
            assert_abs_diff_eq!(gq.margin(&x), want, epsilon = 1e-10);
        }
    }

    #[test]
    fn halfspace_geometry() {
        let obs = Obstacle::deterministic(DVector::from_vec(vec![1.0, 2.0]), 0.3).unwrap();
        let r_rob = 0.2;
        let r_safe = 0.5;
        // nominal straight out on +x at twice the safety distance
        let x_nom = DVector::from_vec(vec![1.0 + 2.0 * r_safe, 2.0]);
        let (a, b) = det_obstacle_halfspace(&x_nom, &obs, r_rob).unwrap();
        // boundary passes through center + r_safe * direction, for any
        // tangential offset
        for t in [-3.0, 0.0, 1.7] {
            let boundary = DVector::from_vec(vec![1.0 + r_safe, 2.0 + t]);
            assert_abs_diff_eq!(a.dot(&boundary) + b, 0.0, epsilon = 1e-12);
        }
        // the nominal itself is feasible once it is outside the ball
        assert!(a.dot(&x_nom) + b <= 0.0);
        // degenerate nominal rejected
        assert!(matches!(
            det_obstacle_halfspace(&obs.center_mean.clone(), &obs, r_rob),
            Err(ConstraintError::DegenerateNominal)
        ));
    }

    #[test]
    fn halfspace_excludes_safety_ball_by_rejection_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let center = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let radius = rng.gen_range(0.2..0.8);
            let r_rob = rng.gen_range(0.0..0.3);
            let obs = Obstacle::deterministic(center.clone(), radius).unwrap();
            let r_safe = radius + r_rob;
            let x_nom = &center
                + DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)).normalize()
                    * (r_safe + rng.gen_range(0.1..2.0));
            let (a, b) = det_obstacle_halfspace(&x_nom, &obs, r_rob).unwrap();
            let mut kept = 0usize;
            for _ in 0..10_000 {
                let x = DVector::from_fn(2, |_, _| rng.gen_range(-5.0..5.0));
                if a.dot(&x) + b <= 0.0 {
                    kept += 1;
                    assert!(
                        (&x - &center).norm() >= r_safe - 1e-9,
                        "feasible point inside safety ball"
                    );
                }
            }
            assert!(kept > 100, "rejection sampler starved");
        }
    }

    #[test]
    fn stochastic_surrogate_reduces_and_inflates() {
        let center = DVector::from_vec(vec![0.3, 1.0]);
        let x_nom = DVector::from_vec(vec![0.3, 2.0]);
        let r_rob = 0.1;
        let eps = 0.05;
        let robot_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.002, 0.003]));
        // zero obstacle covariance reduces to the deterministic margin
        let det_obs = Obstacle::deterministic(center.clone(), 0.5).unwrap();
        let s0 =
            stoch_obstacle_surrogate(&x_nom, &det_obs, r_rob, eps, &robot_cov, None).unwrap();
        let (a, b) = det_obstacle_halfspace(&x_nom, &det_obs, r_rob).unwrap();
        let kappa = dr_tightening(eps).unwrap();
        let det_margin = a.dot(&x_nom) + b + kappa * (&robot_cov * &a).dot(&a).sqrt();
        assert_relative_eq!(s0.value, det_margin, epsilon = 1e-12);
        assert_abs_diff_eq!(s0.extra_var, 0.0);
        // isotropic center noise inflates the root term by exactly a'a d^2
        let d2 = 1e-4;
        let stoch_obs =
            Obstacle::new(center.clone(), DMatrix::identity(2, 2) * d2, 0.5).unwrap();
        let s1 =
            stoch_obstacle_surrogate(&x_nom, &stoch_obs, r_rob, eps, &robot_cov, None).unwrap();
        assert_relative_eq!(s1.extra_var, a.dot(&a) * d2, epsilon = 1e-12);
        let expect =
            a.dot(&x_nom) + b + kappa * ((&robot_cov * &a).dot(&a) + a.dot(&a) * d2).sqrt();
        assert_relative_eq!(s1.value, expect, epsilon = 1e-12);
        // uncertain obstacle is strictly tighter than deterministic
        assert!(s1.value > s0.value);
        // cross covariance enters with factor two
        let sxp = DMatrix::identity(2, 2) * 2e-5;
        let s2 = stoch_obstacle_surrogate(&x_nom, &stoch_obs, r_rob, eps, &robot_cov, Some(&sxp))
            .unwrap();
        assert_relative_eq!(s2.extra_var, a.dot(&a) * (d2 + 4e-5), epsilon = 1e-12);
    }

    #[test]
    fn terminal_spec_rows_and_infeasible_example() {
        let basis = build_basis(1, 2).unwrap();
        let spec = terminal_constraints(
            &DVector::from_vec(vec![1.0, -2.0]),
            &DMatrix::identity(2, 2),
            0.01,
            0.05,
            &basis,
        )
        .unwrap();
        let rows: Vec<(usize, f64)> = spec.mean_rows(basis.len()).collect();
        assert_eq!(rows, vec![(0, 1.0), (3, -2.0)]);
        // a zero-variance state satisfies the trace constraint outright
        let x = GpcState::new(2, DVector::from_vec(vec![1.0, 0.0, 0.0, -2.0, 0.0, 0.0])).unwrap();
        assert!(spec.variance.margin(&x) <= 0.0);
        // Sigma = diag(0.005, 0.005), c_f = 0.01: tr/c - eps = 1 - 0.05 > 0
        let s = 0.005f64.sqrt();
        let x = GpcState::new(2, DVector::from_vec(vec![1.0, s, 0.0, -2.0, s, 0.0])).unwrap();
        assert_relative_eq!(spec.variance.margin(&x), 0.95, epsilon = 1e-12);
        // off-diagonal weights are rejected
        assert!(matches!(
            terminal_constraints(
                &DVector::zeros(2),
                &DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
                0.01,
                0.05,
                &basis
            ),
            Err(ConstraintError::NonDiagonalTerminal)
        ));
    }
}
