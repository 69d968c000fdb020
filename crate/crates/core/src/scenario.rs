//! Scenario files: a versioned key-tree (TOML) describing one study — plant,
//! uncertainty model, constraints, horizon, and solver knobs — plus assembly
//! of the solver-facing problem structs from it.
//!
//! [`load_scenario`] materializes every default before validating, so a
//! loaded scenario always echoes its complete configuration and
//! `load_scenario(write_scenario(s)) == s`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{build_basis, default_quad_points, gauss_hermite, BasisError, HermiteBasis};
use crate::constraints::{
    terminal_constraints, ConstraintError, Obstacle, TighteningBound,
};
use crate::mc::{Allocation, PlanDistribution, TrackingGains, ValidationSetup};
use crate::models::{
    double_integrator_model, pendulum_model, spacecraft3dof_model, thruster_allocation,
    SdeModel, SpacecraftParams,
};
use crate::planner::PlannerScene;
use crate::projection::{project_dynamics, GermMap, GpcState, ProjectedDynamics, ProjectionError};
use crate::scp::{nominal_from_controls, ControlNorm, Nominal, ScpConfig, ScpError, ScpProblem};

/// Schema understood by this build; bump on breaking file-format changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Accepted range for every risk level (`eps_col`, `eps_f`, sweep entries).
/// Below the floor the tightening multiplier `sqrt((1-eps)/eps)` blows up.
pub const RISK_MIN: f64 = 0.001;
pub const RISK_MAX: f64 = 0.5;

const DEFAULT_EPS_COL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown model `{0}` (known: pendulum, double-integrator, spacecraft3dof)")]
    UnknownModel(String),
    #[error("unknown parameter `{key}` for model `{model}`")]
    UnknownParam { model: String, key: String },
    #[error("unsupported schema_version {0}; this build reads version {SCHEMA_VERSION}")]
    UnsupportedSchema(u32),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Scp(#[from] ScpError),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field, reason: reason.into() }
}

/// Plant selector plus its numeric parameter map. `sigma` lives on the
/// scenario, not here, so risk sweeps can vary noise without touching the
/// plant block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Initial condition: mean, per-component standard deviation, and which
/// components the gPC expansion treats as uncertain (each consumes one germ
/// dimension). Components with positive stdev that are *not* listed are
/// sampled by Monte-Carlo validation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: Vec<f64>,
    #[serde(default)]
    pub stdev: Vec<f64>,
    #[serde(default)]
    pub uncertain: Vec<usize>,
}

/// Terminal set: mean target `E(x_T) = mean` plus, when `q_diag` is nonzero,
/// the budget `E[(x-mean)' Q (x-mean)] <= c_f * eps_f`-style chance bound on
/// the diagonal quadratic. With `pin_mean` (the default) the mean is an
/// equality and only the variance counts against the budget; without it the
/// planner may trade mean offset against the same budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSetSpec {
    pub mean: Vec<f64>,
    #[serde(default)]
    pub q_diag: Vec<f64>,
    #[serde(default = "default_c_f")]
    pub c_f: f64,
    #[serde(default = "default_eps")]
    pub eps_f: f64,
    #[serde(default = "default_true")]
    pub pin_mean: bool,
}

fn default_true() -> bool {
    true
}

fn default_c_f() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    DEFAULT_EPS_COL
}

/// Spherical obstacle with a Gaussian-uncertain center (diagonal covariance
/// over the workspace coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: Vec<f64>,
    #[serde(default)]
    pub cov: Vec<f64>,
    pub radius: f64,
}

/// Chance-constraint tightening family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    #[default]
    Dr,
    Gaussian,
}

impl Flavor {
    pub fn bound(self) -> TighteningBound {
        match self {
            Flavor::Dr => TighteningBound::DistributionallyRobust,
            Flavor::Gaussian => TighteningBound::Gaussian,
        }
    }
}

/// Solution pipeline: the full projected program, or the predictor-corrector
/// splitting that plans in mean space against frozen tightenings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    GpcScp,
    GpcScpPc,
}

/// Sampling-based global planner configuration. When present, the seed path
/// comes from the planner and the realized horizon is the planned path
/// length; the scenario `horizon` then only sizes the straight-line fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSpec {
    pub node_budget: usize,
    pub goal_bias: f64,
    pub max_edge_steps: usize,
    pub cost_weight: f64,
    pub goal_radius: f64,
    /// Extra clearance on top of `radius + r_rob`, budgeting for the
    /// downstream chance-constraint tightening.
    pub inflate: f64,
    pub sample_lo: Vec<f64>,
    pub sample_hi: Vec<f64>,
    pub metric_weights: Vec<f64>,
}

impl Default for PlannerSpec {
    fn default() -> Self {
        PlannerSpec {
            node_budget: 5000,
            goal_bias: 0.1,
            max_edge_steps: 10,
            cost_weight: 0.1,
            goal_radius: 0.3,
            inflate: 0.1,
            sample_lo: Vec::new(),
            sample_hi: Vec::new(),
            metric_weights: Vec::new(),
        }
    }
}

/// One fully-specified study. Scalar fields precede tables so the TOML
/// serializer can emit the struct in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    /// Diffusion amplitude handed to the plant constructor.
    pub sigma: f64,
    /// Maximum total polynomial degree of the chaos expansion.
    pub p_gpc: u32,
    /// Germ dimension: noise channels plus uncertain initial components.
    pub d_xi: usize,
    #[serde(default)]
    pub r_rob: f64,
    #[serde(default = "default_eps")]
    pub eps_col: f64,
    /// State count of the fixed grid (controls span `horizon - 1` steps).
    pub horizon: usize,
    pub dt: f64,
    #[serde(default)]
    pub flavor: Flavor,
    #[serde(default)]
    pub method: Method,
    pub model: ModelSpec,
    pub x0: InitialSpec,
    #[serde(default)]
    pub terminal: Option<TerminalSetSpec>,
    #[serde(rename = "obstacle", default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub scp: ScpConfig,
    #[serde(default)]
    pub planner: Option<PlannerSpec>,
}

fn check_risk(field: &'static str, eps: f64) -> Result<(), ScenarioError> {
    if !(RISK_MIN..=RISK_MAX).contains(&eps) {
        return Err(invalid(
            field,
            format!("risk {eps} outside [{RISK_MIN}, {RISK_MAX}]"),
        ));
    }
    Ok(())
}

fn check_params(
    model: &ModelSpec,
    allowed: &[&str],
) -> Result<(), ScenarioError> {
    for key in model.params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ScenarioError::UnknownParam {
                model: model.name.clone(),
                key: key.clone(),
            });
        }
    }
    Ok(())
}

impl Scenario {
    /// Fills the length-dependent defaults (zero stdev, zero terminal
    /// weights) so the scenario echoes its complete configuration.
    pub fn materialize(&mut self) {
        let d_x = self.x0.mean.len();
        if self.x0.stdev.is_empty() {
            self.x0.stdev = vec![0.0; d_x];
        }
        if let Some(t) = &mut self.terminal {
            if t.q_diag.is_empty() {
                t.q_diag = vec![0.0; d_x];
            }
        }
        for obs in &mut self.obstacles {
            if obs.cov.is_empty() {
                obs.cov = vec![0.0; obs.center.len()];
            }
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::UnsupportedSchema(self.schema_version));
        }
        let model = self.build_model()?;
        let d_x = model.d_x;
        if !(self.sigma >= 0.0) {
            return Err(invalid("sigma", "must be nonnegative"));
        }
        if self.horizon < 2 {
            return Err(invalid("horizon", "needs at least two states"));
        }
        if !(self.dt > 0.0) || !(self.horizon as f64 * self.dt).is_finite() {
            return Err(invalid("dt", "horizon * dt must be positive and finite"));
        }
        if self.r_rob < 0.0 {
            return Err(invalid("r_rob", "must be nonnegative"));
        }
        check_risk("eps_col", self.eps_col)?;

        if self.x0.mean.len() != d_x {
            return Err(invalid(
                "x0.mean",
                format!("expected {d_x} components, got {}", self.x0.mean.len()),
            ));
        }
        if self.x0.stdev.len() != d_x {
            return Err(invalid(
                "x0.stdev",
                format!("expected {d_x} components, got {}", self.x0.stdev.len()),
            ));
        }
        if self.x0.stdev.iter().any(|s| *s < 0.0) {
            return Err(invalid("x0.stdev", "entries must be nonnegative"));
        }
        let mut seen = vec![false; d_x];
        for &i in &self.x0.uncertain {
            if i >= d_x {
                return Err(invalid("x0.uncertain", format!("component {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid("x0.uncertain", format!("component {i} repeated")));
            }
            if self.x0.stdev[i] <= 0.0 {
                return Err(invalid(
                    "x0.uncertain",
                    format!("component {i} needs positive stdev"),
                ));
            }
        }
        if !self.x0.uncertain.is_empty() && self.p_gpc == 0 {
            return Err(invalid(
                "p_gpc",
                "uncertain initial components need degree >= 1",
            ));
        }
        let expected_d_xi = model.d_w + self.x0.uncertain.len();
        if self.d_xi != expected_d_xi {
            return Err(invalid(
                "d_xi",
                format!(
                    "expected {expected_d_xi} (= {} noise channels + {} uncertain components)",
                    model.d_w,
                    self.x0.uncertain.len()
                ),
            ));
        }

        let workspace = self.collision_idx();
        if workspace.is_empty() && !self.obstacles.is_empty() {
            return Err(invalid("obstacle", "model has no planar workspace"));
        }
        for obs in &self.obstacles {
            if obs.center.len() != workspace.len() {
                return Err(invalid(
                    "obstacle.center",
                    format!("expected {} components, got {}", workspace.len(), obs.center.len()),
                ));
            }
            if !obs.cov.is_empty() && obs.cov.len() != obs.center.len() {
                return Err(invalid(
                    "obstacle.cov",
                    "diagonal must match the center length",
                ));
            }
            if obs.cov.iter().any(|v| *v < 0.0) {
                return Err(invalid("obstacle.cov", "entries must be nonnegative"));
            }
            if !(obs.radius > 0.0) {
                return Err(invalid("obstacle.radius", "must be positive"));
            }
        }

        if let Some(t) = &self.terminal {
            if t.mean.len() != d_x {
                return Err(invalid(
                    "terminal.mean",
                    format!("expected {d_x} components, got {}", t.mean.len()),
                ));
            }
            if !t.q_diag.is_empty() && t.q_diag.len() != d_x {
                return Err(invalid("terminal.q_diag", "diagonal must match the state size"));
            }
            if t.q_diag.iter().any(|v| *v < 0.0) {
                return Err(invalid("terminal.q_diag", "entries must be nonnegative"));
            }
            if !(t.c_f > 0.0) {
                return Err(invalid("terminal.c_f", "must be positive"));
            }
            check_risk("terminal.eps_f", t.eps_f)?;
            if !t.pin_mean && !t.q_diag.iter().any(|v| *v > 0.0) {
                return Err(invalid(
                    "terminal.pin_mean",
                    "a soft terminal mean needs a positive q_diag entry",
                ));
            }
        }

        if !(self.scp.beta > 0.0 && self.scp.beta < 1.0) {
            return Err(invalid("scp.beta", "must lie in (0, 1)"));
        }
        if !(self.scp.expand_factor > 1.0) {
            return Err(invalid("scp.expand_factor", "must exceed 1"));
        }
        if self.scp.max_iter == 0 || self.scp.solver_max_iter == 0 {
            return Err(invalid("scp.max_iter", "iteration budgets must be positive"));
        }
        if !(self.scp.conv_tol > 0.0) || !(self.scp.solver_tol > 0.0) {
            return Err(invalid("scp.conv_tol", "tolerances must be positive"));
        }

        if let Some(p) = &self.planner {
            if self.terminal.is_none() {
                return Err(invalid("planner", "needs a terminal target"));
            }
            for (field, len) in [
                ("planner.sample_lo", p.sample_lo.len()),
                ("planner.sample_hi", p.sample_hi.len()),
                ("planner.metric_weights", p.metric_weights.len()),
            ] {
                if len != d_x {
                    return Err(invalid(field, format!("expected {d_x} components, got {len}")));
                }
            }
            if p.sample_lo.iter().zip(&p.sample_hi).any(|(lo, hi)| lo >= hi) {
                return Err(invalid("planner.sample_lo", "box must have positive extent"));
            }
            if !(p.goal_radius > 0.0) || p.inflate < 0.0 {
                return Err(invalid("planner.goal_radius", "radius positive, inflate nonnegative"));
            }
            if p.node_budget == 0 || p.max_edge_steps == 0 {
                return Err(invalid("planner.node_budget", "budgets must be positive"));
            }
            if !(0.0..=1.0).contains(&p.goal_bias) {
                return Err(invalid("planner.goal_bias", "must lie in [0, 1]"));
            }
            if model
                .control_lower
                .iter()
                .chain(model.control_upper.iter())
                .any(|b| !b.is_finite())
            {
                return Err(invalid("planner", "model control bounds must be finite"));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<SdeModel, ScenarioError> {
        match self.model.name.as_str() {
            "pendulum" => {
                check_params(&self.model, &[])?;
                // `sigma` is the diffusion amplitude; the plant constructor
                // takes the white-noise variance.
                Ok(pendulum_model(self.sigma * self.sigma))
            }
            "double-integrator" => {
                check_params(&self.model, &["d"])?;
                let d = self.model.params.get("d").copied().unwrap_or(2.0);
                if d.fract() != 0.0 || !(1.0..=3.0).contains(&d) {
                    return Err(invalid("model.params.d", "must be 1, 2, or 3"));
                }
                Ok(double_integrator_model(d as usize, self.sigma))
            }
            "spacecraft3dof" => {
                check_params(&self.model, &["mass", "inertia", "arm", "thrust_max"])?;
                Ok(spacecraft3dof_model(self.spacecraft_params()?))
            }
            other => Err(ScenarioError::UnknownModel(other.to_string())),
        }
    }

    fn spacecraft_params(&self) -> Result<SpacecraftParams, ScenarioError> {
        let defaults = SpacecraftParams::default();
        let get = |key: &str, fallback: f64| self.model.params.get(key).copied().unwrap_or(fallback);
        let params = SpacecraftParams {
            mass: get("mass", defaults.mass),
            inertia: get("inertia", defaults.inertia),
            arm: get("arm", defaults.arm),
            sigma: self.sigma,
            thrust_max: get("thrust_max", defaults.thrust_max),
        };
        if params.mass <= 0.0 || params.inertia <= 0.0 || params.arm <= 0.0 || params.thrust_max <= 0.0 {
            return Err(invalid("model.params", "spacecraft parameters must be positive"));
        }
        Ok(params)
    }

    /// State components checked against obstacles (the planar workspace).
    pub fn collision_idx(&self) -> Vec<usize> {
        match self.model.name.as_str() {
            "double-integrator" => {
                let d = self.model.params.get("d").copied().unwrap_or(2.0) as usize;
                (0..d).collect()
            }
            "spacecraft3dof" => vec![0, 1],
            _ => Vec::new(),
        }
    }

    /// Position / velocity blocks used by the tracking controller.
    pub fn tracking_idx(&self) -> (Vec<usize>, Vec<usize>) {
        match self.model.name.as_str() {
            "double-integrator" => {
                let d = self.model.params.get("d").copied().unwrap_or(2.0) as usize;
                ((0..d).collect(), (d..2 * d).collect())
            }
            "spacecraft3dof" => (vec![0, 1, 2], vec![3, 4, 5]),
            _ => (vec![0], vec![1]),
        }
    }

    /// Galerkin projection of the plant at degree `p_override.unwrap_or(p_gpc)`.
    pub fn build_projection(
        &self,
        p_override: Option<u32>,
    ) -> Result<Arc<ProjectedDynamics>, ScenarioError> {
        let p = p_override.unwrap_or(self.p_gpc);
        let model = Arc::new(self.build_model()?);
        let basis = Arc::new(build_basis(self.d_xi, p)?);
        let rule = Arc::new(gauss_hermite(default_quad_points(p), self.d_xi)?);
        let germ_map = GermMap::standard(model.d_w, model.d_x, &self.x0.uncertain)?;
        Ok(Arc::new(project_dynamics(model, basis, rule, germ_map)?))
    }

    /// Initial chaos coefficients: mean in the constant slots, the stdev of
    /// each uncertain component on its degree-one germ polynomial.
    pub fn initial_gpc(&self, pd: &ProjectedDynamics) -> GpcState {
        let l = pd.basis.len();
        let d_x = pd.model.d_x;
        let mut x = GpcState::zeros(d_x, l);
        for i in 0..d_x {
            x.coeffs[i * l] = self.x0.mean[i];
        }
        for &i in &self.x0.uncertain {
            let germ = pd.germ_map.initial_germ(i).expect("validated uncertain component");
            x.coeffs[i * l + pd.basis.linear_index(germ)] = self.x0.stdev[i];
        }
        x
    }

    /// Full planning instance on the scenario's fixed grid.
    pub fn to_problem(
        &self,
        pd: Arc<ProjectedDynamics>,
        horizon: usize,
    ) -> Result<ScpProblem, ScenarioError> {
        let x0 = self.initial_gpc(&pd);
        let basis = pd.basis.clone();
        let mut prob = ScpProblem::new(pd, horizon, self.dt, x0)?;
        prob.control_norm = ControlNorm::L2;
        prob.control_weight = 1.0;
        prob.pos_idx = self.collision_idx();
        prob.eps_col = self.eps_col;
        prob.r_rob = self.r_rob;
        prob.bound = self.flavor.bound();
        for obs in &self.obstacles {
            prob.obstacles.push(self.build_obstacle(obs)?);
        }
        if let Some(t) = &self.terminal {
            prob.terminal = Some(self.build_terminal(t, &basis)?);
        }
        Ok(prob)
    }

    fn build_obstacle(&self, obs: &ObstacleSpec) -> Result<Obstacle, ScenarioError> {
        let d = obs.center.len();
        let cov = if obs.cov.is_empty() {
            DMatrix::zeros(d, d)
        } else {
            DMatrix::from_diagonal(&DVector::from_vec(obs.cov.clone()))
        };
        Ok(Obstacle::new(DVector::from_vec(obs.center.clone()), cov, obs.radius)?)
    }

    fn build_terminal(
        &self,
        t: &TerminalSetSpec,
        basis: &HermiteBasis,
    ) -> Result<crate::constraints::TerminalSpec, ScenarioError> {
        let d_x = t.mean.len();
        let q = if t.q_diag.is_empty() {
            DMatrix::zeros(d_x, d_x)
        } else {
            DMatrix::from_diagonal(&DVector::from_vec(t.q_diag.clone()))
        };
        let spec =
            terminal_constraints(&DVector::from_vec(t.mean.clone()), &q, t.c_f, t.eps_f, basis)?;
        Ok(if t.pin_mean { spec } else { spec.soft_mean() })
    }

    /// Straight-line seed: means interpolate toward the terminal target
    /// (higher coefficients held at their initial values), controls zero.
    /// Without a terminal target the zero-control propagation is used.
    pub fn initial_nominal(&self, prob: &ScpProblem) -> Result<Nominal, ScenarioError> {
        let Some(t) = &self.terminal else {
            let d_u = prob.dynamics.model.d_u;
            let controls = vec![DVector::zeros(d_u); prob.horizon - 1];
            return Ok(nominal_from_controls(prob, controls)?);
        };
        let l = prob.dynamics.basis.len();
        let d_x = prob.dynamics.model.d_x;
        let steps = prob.horizon - 1;
        let states = (0..prob.horizon)
            .map(|k| {
                let tau = k as f64 / steps as f64;
                let mut x = prob.x0.clone();
                for i in 0..d_x {
                    x.coeffs[i * l] += tau * (t.mean[i] - self.x0.mean[i]);
                }
                x
            })
            .collect();
        let controls = vec![DVector::zeros(prob.dynamics.model.d_u); steps];
        Ok(Nominal { states, controls })
    }

    /// Scene for the sampling-based seed planner.
    pub fn to_planner_scene(&self) -> Result<PlannerScene, ScenarioError> {
        let spec = self
            .planner
            .as_ref()
            .ok_or_else(|| invalid("planner", "scenario has no planner block"))?;
        let terminal = self
            .terminal
            .as_ref()
            .ok_or_else(|| invalid("planner", "needs a terminal target"))?;
        let model = Arc::new(self.build_model()?);
        let control_lo = model.control_lower.clone();
        let control_hi = model.control_upper.clone();
        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for obs in &self.obstacles {
            obstacles.push(self.build_obstacle(obs)?);
        }
        Ok(PlannerScene {
            model,
            x0: DVector::from_vec(self.x0.mean.clone()),
            goal_center: DVector::from_vec(terminal.mean.clone()),
            goal_radius: spec.goal_radius,
            obstacles,
            r_rob: self.r_rob,
            inflate: spec.inflate,
            pos_idx: self.collision_idx(),
            sample_lo: DVector::from_vec(spec.sample_lo.clone()),
            sample_hi: DVector::from_vec(spec.sample_hi.clone()),
            control_lo,
            control_hi,
            weights: DVector::from_vec(spec.metric_weights.clone()),
            dt: self.dt,
        })
    }

    /// Monte-Carlo validation harness around a planned trajectory.
    pub fn validation_setup(
        &self,
        nominal_states: Vec<DVector<f64>>,
        nominal_controls: Vec<DVector<f64>>,
        sampled_plan: Option<PlanDistribution>,
    ) -> Result<ValidationSetup, ScenarioError> {
        let model = Arc::new(self.build_model()?);
        let (pos_idx, vel_idx) = self.tracking_idx();
        let allocation = match self.model.name.as_str() {
            "spacecraft3dof" => {
                let params = self.spacecraft_params()?;
                Allocation::MatrixFn(Arc::new(move |x: &DVector<f64>| {
                    thruster_allocation(x[2], &params)
                }))
            }
            _ => Allocation::Direct,
        };
        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for obs in &self.obstacles {
            obstacles.push(self.build_obstacle(obs)?);
        }
        let (terminal_mean, terminal_q_diag, terminal_c) = match &self.terminal {
            Some(t) => (
                Some(DVector::from_vec(t.mean.clone())),
                Some(DVector::from_vec(if t.q_diag.is_empty() {
                    vec![0.0; t.mean.len()]
                } else {
                    t.q_diag.clone()
                })),
                t.c_f,
            ),
            None => (None, None, 1.0),
        };
        Ok(ValidationSetup {
            model,
            nominal_states,
            nominal_controls,
            dt: self.dt,
            x0_mean: DVector::from_vec(self.x0.mean.clone()),
            x0_stdev: DVector::from_vec(self.x0.stdev.clone()),
            obstacles,
            r_rob: self.r_rob,
            collision_idx: self.collision_idx(),
            pos_idx,
            vel_idx,
            terminal_mean,
            terminal_q_diag,
            terminal_c,
            gains: TrackingGains::default(),
            allocation,
            sampled_plan,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string())
}

/// Parses, materializes defaults, and validates.
pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let mut scenario: Scenario = toml::from_str(text).map_err(|source| ScenarioError::Parse {
        path: origin.to_string(),
        source: Box::new(source),
    })?;
    scenario.materialize();
    scenario.validate()?;
    Ok(scenario)
}

pub fn write_scenario(scenario: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let text = toml::to_string_pretty(scenario)?;
    std::fs::write(path, text).map_err(|source| ScenarioError::Write {
        path: path.display().to_string(),
        source,
    })
}

pub const BUNDLED_NAMES: [&str; 6] = ["fig3", "fig4", "fig5", "fig7", "fig8", "fig11"];

/// The studies shipped with the toolkit, fully materialized.
///
/// `fig3` is a propagation-accuracy case (free pendulum); `fig4`/`fig5`/
/// `fig7` are the single-stochastic-obstacle spacecraft map (`fig5` adding a
/// terminal variance budget, `fig7` sized for risk sweeps down to 0.01);
/// `fig8` budgets a soft terminal mean against a tight quadratic; `fig11` is
/// the four-obstacle map with an uncertain start, seeded by the sampling
/// planner.
///
/// Grid sizing: with the time-frozen germ the terminal position spread is
/// `sigma * displacement / sqrt(dt)` regardless of the thrust profile, so the
/// noise amplitude and step length are chosen per study to leave the
/// tightened cones a real corridor at the worst sweep risk.
pub fn bundled(name: &str) -> Option<Scenario> {
    let spacecraft = |name: &str| Scenario {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        sigma: 0.1,
        p_gpc: 2,
        d_xi: 1,
        r_rob: 0.0,
        eps_col: DEFAULT_EPS_COL,
        horizon: 21,
        dt: 5.0,
        flavor: Flavor::Dr,
        method: Method::GpcScp,
        model: ModelSpec { name: "spacecraft3dof".to_string(), params: BTreeMap::new() },
        x0: InitialSpec { mean: vec![0.0; 6], stdev: vec![0.0; 6], uncertain: Vec::new() },
        terminal: Some(TerminalSetSpec {
            mean: vec![0.3, 2.3, 0.0, 0.0, 0.0, 0.0],
            q_diag: vec![0.0; 6],
            c_f: 1.0,
            eps_f: 0.05,
            pin_mean: true,
        }),
        obstacles: vec![ObstacleSpec {
            center: vec![0.3, 1.0],
            cov: vec![1e-4, 1e-4],
            radius: 0.5,
        }],
        scp: ScpConfig::default(),
        planner: None,
    };
    let mut scenario = match name {
        "fig3" => Scenario {
            schema_version: SCHEMA_VERSION,
            name: "fig3".to_string(),
            sigma: 0.001_f64.sqrt(),
            p_gpc: 1,
            d_xi: 1,
            r_rob: 0.0,
            eps_col: DEFAULT_EPS_COL,
            horizon: 501,
            dt: 0.01,
            flavor: Flavor::Dr,
            method: Method::GpcScp,
            model: ModelSpec { name: "pendulum".to_string(), params: BTreeMap::new() },
            x0: InitialSpec {
                mean: vec![std::f64::consts::FRAC_PI_4, 0.0],
                stdev: vec![0.0, 0.0],
                uncertain: Vec::new(),
            },
            terminal: None,
            obstacles: Vec::new(),
            scp: ScpConfig::default(),
            planner: None,
        },
        "fig4" => spacecraft("fig4"),
        "fig5" => {
            // Same map with the terminal variance cone engaged; the budget
            // sits just above the displacement-invariant trace so it stays
            // feasible for every expansion order.
            let mut s = spacecraft("fig5");
            let t = s.terminal.as_mut().expect("terminal present");
            t.q_diag = vec![1.0; 6];
            t.c_f = 0.5;
            s
        }
        "fig7" => {
            // Sized so the distributionally robust cone at eps = 0.01
            // (kappa ~ 9.95) still clears the goal-obstacle gap.
            let mut s = spacecraft("fig7");
            s.sigma = 0.05;
            s
        }
        "fig8" => {
            // Soft terminal mean: the quadratic budget c_f * eps_f is shared
            // between the mean offset and the invariant variance trace, so
            // looser flavors stop short of the target and spend the savings.
            let mut s = spacecraft("fig8");
            s.sigma = 0.015;
            let t = s.terminal.as_mut().expect("terminal present");
            t.q_diag = vec![1.0; 6];
            t.c_f = 0.005;
            t.pin_mean = false;
            s
        }
        "fig11" => {
            let mut s = spacecraft("fig11");
            s.sigma = 0.015;
            s.d_xi = 3;
            s.x0 = InitialSpec {
                mean: vec![-0.9, -2.3, 0.0, 0.0, 0.0, 0.0],
                stdev: vec![0.01, 0.01, 0.0, 0.0, 0.0, 0.0],
                uncertain: vec![0, 1],
            };
            s.terminal = Some(TerminalSetSpec {
                mean: vec![0.0, 2.3, 0.0, 0.0, 0.0, 0.0],
                q_diag: vec![0.0; 6],
                c_f: 1.0,
                eps_f: 0.05,
                pin_mean: true,
            });
            s.obstacles = [
                [-0.46, 1.48],
                [-0.71, -0.57],
                [1.3, 0.04],
                [-2.29, 0.34],
            ]
            .iter()
            .map(|c| ObstacleSpec { center: c.to_vec(), cov: vec![1e-4, 1e-4], radius: 0.4 })
            .collect();
            s.planner = Some(PlannerSpec {
                node_budget: 4000,
                goal_bias: 0.15,
                max_edge_steps: 3,
                cost_weight: 0.1,
                goal_radius: 0.35,
                inflate: 0.08,
                sample_lo: vec![-3.0, -3.0, -std::f64::consts::PI, -0.25, -0.25, -0.3],
                sample_hi: vec![2.5, 3.0, std::f64::consts::PI, 0.25, 0.25, 0.3],
                metric_weights: vec![1.0, 1.0, 0.3, 0.6, 0.6, 0.3],
            });
            s
        }
        _ => return None,
    };
    scenario.materialize();
    scenario.validate().expect("bundled scenarios are valid");
    Some(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn minimal_toml() -> &'static str {
        r#"
            schema_version = 1
            name = "minimal"
            sigma = 0.1
            p_gpc = 1
            d_xi = 2
            horizon = 5
            dt = 0.5

            [model]
            name = "double-integrator"
            [model.params]
            d = 2.0

            [x0]
            mean = [0.0, 0.0, 0.0, 0.0]
        "#
    }

    #[test]
    fn defaults_materialize_and_echo() {
        let s = parse_scenario(minimal_toml(), "inline").unwrap();
        assert_eq!(s.eps_col, DEFAULT_EPS_COL);
        assert_eq!(s.x0.stdev, vec![0.0; 4]);
        assert_eq!(s.flavor, Flavor::Dr);
        assert_eq!(s.method, Method::GpcScp);
        assert_eq!(s.scp, ScpConfig::default());
        let text = toml::to_string_pretty(&s).unwrap();
        assert!(text.contains("eps_col = 0.05"), "defaults echoed:\n{text}");
        assert!(text.contains("flavor = \"dr\""));
    }

    #[test]
    fn risk_outside_clamp_range_is_rejected() {
        let text = minimal_toml().replace("dt = 0.5", "dt = 0.5\neps_col = 1e-7");
        let err = parse_scenario(&text, "inline").unwrap_err();
        assert!(err.to_string().contains("eps_col"), "{err}");
        let text = minimal_toml().replace("dt = 0.5", "dt = 0.5\neps_col = 0.7");
        assert!(parse_scenario(&text, "inline").is_err());
    }

    #[test]
    fn schema_violations_carry_field_paths() {
        let unknown_field = minimal_toml().replace("sigma = 0.1", "sigma = 0.1\nbogus = 3");
        let err = parse_scenario(&unknown_field, "inline").unwrap_err();
        assert!(err.to_string().contains("parse"), "{err}");

        let unknown_model = minimal_toml().replace("double-integrator", "unicycle");
        let err = parse_scenario(&unknown_model, "inline").unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownModel(ref m) if m == "unicycle"), "{err}");

        let unknown_param =
            minimal_toml().replace("d = 2.0", "d = 2.0\nwheelbase = 1.0");
        let err = parse_scenario(&unknown_param, "inline").unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownParam { ref key, .. } if key == "wheelbase"));

        let bad_dim = minimal_toml().replace("mean = [0.0, 0.0, 0.0, 0.0]", "mean = [0.0, 0.0]");
        let err = parse_scenario(&bad_dim, "inline").unwrap_err();
        assert!(err.to_string().contains("x0.mean"), "{err}");

        let bad_germ = minimal_toml().replace("d_xi = 2", "d_xi = 5");
        let err = parse_scenario(&bad_germ, "inline").unwrap_err();
        assert!(err.to_string().contains("d_xi"), "{err}");
    }

    #[test]
    fn pendulum_rejects_obstacles() {
        let mut s = bundled("fig3").unwrap();
        s.obstacles.push(ObstacleSpec { center: vec![0.0], cov: vec![], radius: 0.1 });
        s.materialize();
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("workspace"), "{err}");
    }

    #[test]
    fn bundled_scenarios_validate_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in BUNDLED_NAMES {
            let s = bundled(name).unwrap_or_else(|| panic!("{name} bundled"));
            assert_eq!(s.name, name);
            let path = dir.path().join(format!("{name}.scenario"));
            write_scenario(&s, &path).unwrap();
            let loaded = load_scenario(&path).unwrap();
            assert_eq!(loaded, s, "round trip for {name}");
        }
        assert!(bundled("fig99").is_none());
    }

    #[test]
    fn shipped_files_match_bundled_definitions() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        for name in BUNDLED_NAMES {
            let path = root.join(format!("{name}.scenario"));
            let loaded = load_scenario(&path)
                .unwrap_or_else(|e| panic!("loading {}: {e}", path.display()));
            assert_eq!(loaded, bundled(name).unwrap(), "shipped {name}.scenario");
        }
    }

    #[test]
    fn fig4_assembles_a_consistent_problem() {
        let s = bundled("fig4").unwrap();
        let pd = s.build_projection(None).unwrap();
        assert_eq!(pd.basis.len(), 3); // univariate germ, degree 2
        let prob = s.to_problem(pd.clone(), s.horizon).unwrap();
        assert_eq!(prob.n_x(), 18);
        assert_eq!(prob.obstacles.len(), 1);
        assert_eq!(prob.pos_idx, vec![0, 1]);
        assert!(matches!(prob.bound, TighteningBound::DistributionallyRobust));
        let terminal = prob.terminal.as_ref().expect("terminal target");
        assert_abs_diff_eq!(terminal.xf_mean[1], 2.3);

        // Deterministic start: mean in the constant slots, nothing else.
        assert_eq!(prob.x0.mean(), DVector::zeros(6));
        assert_eq!(prob.x0.coeffs.iter().filter(|c| **c != 0.0).count(), 0);

        let nominal = s.initial_nominal(&prob).unwrap();
        assert_eq!(nominal.states.len(), 21);
        assert_abs_diff_eq!(nominal.states[20].mean()[1], 2.3, epsilon = 1e-12);
        assert_abs_diff_eq!(nominal.states[10].mean()[0], 0.15, epsilon = 1e-12);
    }

    #[test]
    fn fig11_maps_uncertain_start_onto_germs() {
        let s = bundled("fig11").unwrap();
        let pd = s.build_projection(None).unwrap();
        assert_eq!(pd.basis.dim, 3);
        let x0 = s.initial_gpc(&pd);
        let l = pd.basis.len();
        // Position x: germ 1 (after the noise channel), stdev 0.01.
        assert_eq!(x0.coeffs[pd.basis.linear_index(1)], 0.01);
        assert_eq!(x0.coeffs[l + pd.basis.linear_index(2)], 0.01);
        // No mass on the noise germ at t = 0.
        assert_eq!(x0.coeffs[pd.basis.linear_index(0)], 0.0);

        let scene = s.to_planner_scene().unwrap();
        assert_eq!(scene.obstacles.len(), 4);
        assert_eq!(scene.goal_center[1], 2.3);
        assert!(scene.control_hi.iter().all(|b| *b == 0.45));
    }

    #[test]
    fn validation_setup_carries_the_scenario_map() {
        let s = bundled("fig8").unwrap();
        let states = vec![DVector::zeros(6); s.horizon];
        let controls = vec![DVector::zeros(8); s.horizon - 1];
        let setup = s.validation_setup(states, controls, None).unwrap();
        assert_eq!(setup.collision_idx, vec![0, 1]);
        assert_eq!(setup.pos_idx, vec![0, 1, 2]);
        assert_eq!(setup.vel_idx, vec![3, 4, 5]);
        assert_eq!(setup.terminal_c, 0.005);
        assert!(matches!(setup.allocation, Allocation::MatrixFn(_)));
        assert_eq!(setup.terminal_q_diag.as_ref().unwrap(), &DVector::from_element(6, 1.0));
    }

    /// Regenerates the shipped scenario files from the bundled definitions.
    /// Run manually after editing `bundled`:
    /// `cargo test -p gpcscp --lib scenario -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_shipped_files() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        std::fs::create_dir_all(&root).unwrap();
        for name in BUNDLED_NAMES {
            let path = root.join(format!("{name}.scenario"));
            write_scenario(&bundled(name).unwrap(), &path).unwrap();
        }
    }
}
