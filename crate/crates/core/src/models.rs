//! SDE plant interface and the benchmark plants: pendulum, double
//! integrator, and a planar three-degree-of-freedom spacecraft.
//!
//! A plant is `dx = f(x, u) dt + g(x, u) dw` with `g` a `d_x x d_w` matrix
//! over independent Wiener channels. Evaluators are pure; all randomness is
//! supplied by the caller.

use nalgebra::{DMatrix, DVector};

type DriftFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type DiffusionFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;
/// Jacobian pair `(d/dx, d/du)`.
type JacobianFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;
/// Per-channel diffusion Jacobian `(d g_k / dx, d g_k / du)`.
type ChannelJacobianFn =
    dyn Fn(&DVector<f64>, &DVector<f64>, usize) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

pub struct SdeModel {
    pub d_x: usize,
    pub d_u: usize,
    pub d_w: usize,
    pub control_lower: DVector<f64>,
    pub control_upper: DVector<f64>,
    drift: Box<DriftFn>,
    diffusion: Box<DiffusionFn>,
    drift_jacobian: Option<Box<JacobianFn>>,
    diffusion_jacobian: Option<Box<ChannelJacobianFn>>,
}

impl SdeModel {
    /// Plant from drift/diffusion evaluators; Jacobians default to central
    /// finite differences until supplied.
    pub fn new(
        d_x: usize,
        d_u: usize,
        d_w: usize,
        drift: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        diffusion: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        control_lower: DVector<f64>,
        control_upper: DVector<f64>,
    ) -> Self {
        assert_eq!(control_lower.len(), d_u);
        assert_eq!(control_upper.len(), d_u);
        assert!(
            control_lower.iter().zip(control_upper.iter()).all(|(l, u)| l <= u),
            "control bounds must be ordered"
        );
        SdeModel {
            d_x,
            d_u,
            d_w,
            control_lower,
            control_upper,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            drift_jacobian: None,
            diffusion_jacobian: None,
        }
    }

    pub fn with_drift_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>)
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.drift_jacobian = Some(Box::new(jac));
        self
    }

    pub fn with_diffusion_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>, &DVector<f64>, usize) -> (DMatrix<f64>, DMatrix<f64>)
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.diffusion_jacobian = Some(Box::new(jac));
        self
    }

    pub fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x, u)
    }

    pub fn diffusion(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.diffusion)(x, u)
    }

    /// `(df/dx, df/du)`, analytic when available, else central differences
    /// with step `1e-6 (1 + |z_j|)` per coordinate.
    pub fn drift_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        if let Some(jac) = &self.drift_jacobian {
            return jac(x, u);
        }
        let fx = fd_jacobian(x, |xp| (self.drift)(xp, u));
        let fu = fd_jacobian(u, |up| (self.drift)(x, up));
        (fx, fu)
    }

    /// Jacobians of diffusion column `channel`: `(dg_k/dx, dg_k/du)`.
    pub fn diffusion_jacobian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        channel: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        if let Some(jac) = &self.diffusion_jacobian {
            return jac(x, u, channel);
        }
        let gx = fd_jacobian(x, |xp| (self.diffusion)(xp, u).column(channel).into_owned());
        let gu = fd_jacobian(u, |up| (self.diffusion)(x, up).column(channel).into_owned());
        (gx, gu)
    }

    /// One Euler-Maruyama step `x + f dt + g sqrt(dt) noise`.
    pub fn euler_maruyama_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
        noise: &DVector<f64>,
    ) -> DVector<f64> {
        debug_assert!(dt > 0.0);
        debug_assert_eq!(noise.len(), self.d_w);
        let mut next = x + self.drift(x, u) * dt;
        if self.d_w > 0 {
            next += self.diffusion(x, u) * noise * dt.sqrt();
        }
        next
    }

    pub fn clamp_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.d_u, |i, _| {
            u[i].clamp(self.control_lower[i], self.control_upper[i])
        })
    }
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("d_x", &self.d_x)
            .field("d_u", &self.d_u)
            .field("d_w", &self.d_w)
            .finish_non_exhaustive()
    }
}

/// Central finite differences of `f` at `z`, one column per coordinate.
fn fd_jacobian(z: &DVector<f64>, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    if z.is_empty() {
        let probe = f(z);
        return DMatrix::zeros(probe.len(), 0);
    }
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        zp[j] += h;
        let mut zm = z.clone();
        zm[j] -= h;
        cols.push((f(&zp) - f(&zm)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Damped pendulum with additive angular-velocity noise: state `(theta,
/// theta_dot)`, no control, one Wiener channel of variance `noise_var` per
/// unit time.
pub fn pendulum_model(noise_var: f64) -> SdeModel {
    assert!(noise_var >= 0.0, "noise variance must be nonnegative");
    let g = noise_var.sqrt();
    SdeModel::new(
        2,
        0,
        1,
        |x, _| DVector::from_vec(vec![x[1], -x[0].sin() - 0.8 * x[1]]),
        move |_, _| DMatrix::from_column_slice(2, 1, &[0.0, g]),
        DVector::zeros(0),
        DVector::zeros(0),
    )
    .with_drift_jacobian(|x, _| {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -x[0].cos(), -0.8]),
            DMatrix::zeros(2, 0),
        )
    })
    .with_diffusion_jacobian(|_, _, _| (DMatrix::zeros(2, 2), DMatrix::zeros(2, 0)))
}

/// Double integrator in `d` spatial dimensions with control-multiplicative
/// noise: state `(p, v)`, drift `(v, u)`, diffusion `sigma u_i` on velocity
/// row `i` for channel `i`.
pub fn double_integrator_model(d: usize, sigma: f64) -> SdeModel {
    assert!((1..=3).contains(&d), "spatial dimension must be 1..=3");
    let inf = DVector::from_element(d, f64::INFINITY);
    SdeModel::new(
        2 * d,
        d,
        d,
        move |x, u| {
            DVector::from_fn(2 * d, |i, _| if i < d { x[d + i] } else { u[i - d] })
        },
        move |_, u| {
            DMatrix::from_fn(2 * d, d, |r, c| if r == d + c { sigma * u[c] } else { 0.0 })
        },
        -inf.clone(),
        inf,
    )
    .with_drift_jacobian(move |_, _| {
        let mut fx = DMatrix::zeros(2 * d, 2 * d);
        let mut fu = DMatrix::zeros(2 * d, d);
        for i in 0..d {
            fx[(i, d + i)] = 1.0;
            fu[(d + i, i)] = 1.0;
        }
        (fx, fu)
    })
    .with_diffusion_jacobian(move |_, _, k| {
        let mut gu = DMatrix::zeros(2 * d, d);
        gu[(d + k, k)] = sigma;
        (DMatrix::zeros(2 * d, 2 * d), gu)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SpacecraftParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub inertia: f64,
    /// thruster moment arm, m
    pub arm: f64,
    /// lumped diffusion scale
    pub sigma: f64,
    /// per-thruster bound, N
    pub thrust_max: f64,
}

impl Default for SpacecraftParams {
    fn default() -> Self {
        SpacecraftParams { mass: 10.0, inertia: 1.62, arm: 0.4, sigma: 0.1, thrust_max: 0.45 }
    }
}

impl SpacecraftParams {
    fn validate(&self) {
        assert!(
            self.mass > 0.0
                && self.inertia > 0.0
                && self.arm > 0.0
                && self.sigma >= 0.0
                && self.thrust_max > 0.0,
            "spacecraft parameters must be positive"
        );
    }
}

/// Control allocation `B(theta)`: maps the eight thruster magnitudes to
/// planar acceleration (world frame) and angular acceleration.
///
/// Thrusters sit in four opposing pairs on a square body of half-width
/// `arm/2`: columns 0-3 push along +/- x_body, columns 4-7 along +/- y_body,
/// each with torque arm `arm/2` and alternating torque sign.
pub fn thruster_allocation(theta: f64, params: &SpacecraftParams) -> DMatrix<f64> {
    params.validate();
    let (s, c) = theta.sin_cos();
    let half = params.arm / 2.0;
    let mut b = DMatrix::zeros(3, 8);
    for j in 0..8 {
        let (fx_body, fy_body) = if j < 4 {
            (if j < 2 { 1.0 } else { -1.0 }, 0.0)
        } else {
            (0.0, if j < 6 { 1.0 } else { -1.0 })
        };
        b[(0, j)] = (c * fx_body - s * fy_body) / params.mass;
        b[(1, j)] = (s * fx_body + c * fy_body) / params.mass;
        b[(2, j)] = if j % 2 == 0 { half } else { -half } / params.inertia;
    }
    b
}

/// Planar spacecraft: state `(x, y, theta, vx, vy, omega)`, eight bounded
/// thrusters, and a single lumped noise channel `sigma * (0, B(theta) u)`.
pub fn spacecraft3dof_model(params: SpacecraftParams) -> SdeModel {
    params.validate();
    let sigma = params.sigma;
    let drift_params = params;
    let diff_params = params;
    SdeModel::new(
        6,
        8,
        1,
        move |x, u| {
            let acc = thruster_allocation(x[2], &drift_params) * u;
            DVector::from_vec(vec![x[3], x[4], x[5], acc[0], acc[1], acc[2]])
        },
        move |x, u| {
            let acc = thruster_allocation(x[2], &diff_params) * u;
            DMatrix::from_column_slice(
                6,
                1,
                &[0.0, 0.0, 0.0, sigma * acc[0], sigma * acc[1], sigma * acc[2]],
            )
        },
        DVector::zeros(8),
        DVector::from_element(8, params.thrust_max),
    )
}
