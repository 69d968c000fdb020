//! Kinodynamic seeding of the SCP stage: an anytime cost-bounded RRT over the
//! nominal deterministic ODE `xdot = f(x, u)`.
//!
//! The tree grows in (state, cost) space: samples carry a cost coordinate
//! drawn below the current best solution cost, nearest-neighbor queries use a
//! weighted state metric plus the cost axis, and extensions whose
//! cost-to-come already exceeds the bound are rejected. Every accepted
//! solution therefore has non-increasing cost, and the best one is returned
//! as a fixed-step control/state sequence ready to seed the SCP loop.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::constraints::Obstacle;
use crate::models::SdeModel;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("initial state violates an inflated obstacle")]
    UnsafeStart,
    #[error("no solution within {nodes} expanded nodes")]
    NoSolution { nodes: usize },
}

/// One tree vertex; the root carries no parent and zero cost.
#[derive(Debug, Clone)]
pub struct TreeNode {
    pub state: DVector<f64>,
    pub parent: Option<usize>,
    pub edge_control: DVector<f64>,
    /// Edge duration in seconds (a multiple of the scene `dt`).
    pub edge_duration: f64,
    pub cost_to_come: f64,
}

/// Static planning inputs: nominal plant, map, sampling boxes, and metric.
///
/// The goal is the ball `||w (x - goal_center)|| <= goal_radius` in the same
/// weighted metric used for nearest-neighbor queries. `inflate` is an extra
/// clearance on top of `radius + r_rob`, budgeting for the downstream
/// chance-constraint tightening.
pub struct PlannerScene {
    pub model: Arc<SdeModel>,
    pub x0: DVector<f64>,
    pub goal_center: DVector<f64>,
    pub goal_radius: f64,
    pub obstacles: Vec<Obstacle>,
    pub r_rob: f64,
    pub inflate: f64,
    pub pos_idx: Vec<usize>,
    pub sample_lo: DVector<f64>,
    pub sample_hi: DVector<f64>,
    pub control_lo: DVector<f64>,
    pub control_hi: DVector<f64>,
    pub weights: DVector<f64>,
    pub dt: f64,
}

impl PlannerScene {
    fn check(&self) -> Result<(), PlannerError> {
        let d_x = self.model.d_x;
        for (what, len) in [
            ("initial state", self.x0.len()),
            ("goal center", self.goal_center.len()),
            ("sampling lower bound", self.sample_lo.len()),
            ("sampling upper bound", self.sample_hi.len()),
            ("metric weights", self.weights.len()),
        ] {
            if len != d_x {
                return Err(PlannerError::DimensionMismatch { what, expected: d_x, got: len });
            }
        }
        let d_u = self.model.d_u;
        if self.control_lo.len() != d_u || self.control_hi.len() != d_u {
            return Err(PlannerError::DimensionMismatch {
                what: "control sampling box",
                expected: d_u,
                got: self.control_lo.len(),
            });
        }
        for obs in &self.obstacles {
            if obs.center_mean.len() != self.pos_idx.len() {
                return Err(PlannerError::DimensionMismatch {
                    what: "obstacle center",
                    expected: self.pos_idx.len(),
                    got: obs.center_mean.len(),
                });
            }
        }
        Ok(())
    }

    fn metric(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.weights.iter())
            .map(|((x, y), w)| (w * (x - y)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn in_goal(&self, x: &DVector<f64>) -> bool {
        self.metric(x, &self.goal_center) <= self.goal_radius
    }

    fn clear_of_obstacles(&self, x: &DVector<f64>) -> bool {
        self.obstacles.iter().all(|obs| {
            let d2: f64 = self
                .pos_idx
                .iter()
                .zip(obs.center_mean.iter())
                .map(|(&i, c)| (x[i] - c).powi(2))
                .sum();
            d2.sqrt() >= obs.radius + self.r_rob + self.inflate
        })
    }
}

/// Search knobs; the defaults mirror common kinodynamic-RRT practice.
#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub node_budget: usize,
    /// Probability of steering a sample toward the goal center.
    pub goal_bias: f64,
    /// Edge durations are drawn uniformly from `{1, ..., max_edge_steps} * dt`.
    pub max_edge_steps: usize,
    /// Weight of the cost coordinate in the nearest-neighbor metric.
    pub cost_weight: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { node_budget: 5000, goal_bias: 0.1, max_edge_steps: 10, cost_weight: 0.1 }
    }
}

/// Best solution found within the node budget, expanded to the scene's fixed
/// step: `states.len() == controls.len() + 1`.
#[derive(Debug, Clone)]
pub struct AoRrtResult {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// Costs of the accepted solutions in discovery order (non-increasing).
    pub solution_costs: Vec<f64>,
    pub nodes_expanded: usize,
}

fn euler_edge(
    model: &SdeModel,
    from: &DVector<f64>,
    u: &DVector<f64>,
    steps: usize,
    dt: f64,
) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(steps);
    let mut x = from.clone();
    for _ in 0..steps {
        x = &x + model.drift(&x, u) * dt;
        out.push(x.clone());
    }
    out
}

fn grow(
    scene: &PlannerScene,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<(Vec<TreeNode>, Vec<(usize, f64)>), PlannerError> {
    scene.check()?;
    if !scene.clear_of_obstacles(&scene.x0) {
        return Err(PlannerError::UnsafeStart);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_u = scene.model.d_u;
    let mut tree = vec![TreeNode {
        state: scene.x0.clone(),
        parent: None,
        edge_control: DVector::zeros(d_u),
        edge_duration: 0.0,
        cost_to_come: 0.0,
    }];
    // Accepted (leaf index, cost) pairs; the cost bound shrinks with each.
    let mut solutions: Vec<(usize, f64)> = Vec::new();
    let mut bound = f64::INFINITY;
    let mut max_tree_cost = 0.0f64;

    while tree.len() < cfg.node_budget {
        let toward_goal = rng.gen::<f64>() < cfg.goal_bias;
        let target_state = if toward_goal {
            scene.goal_center.clone()
        } else {
            DVector::from_iterator(
                scene.x0.len(),
                scene
                    .sample_lo
                    .iter()
                    .zip(scene.sample_hi.iter())
                    .map(|(&lo, &hi)| rng.gen_range(lo..=hi)),
            )
        };
        let cost_cap = if bound.is_finite() { bound } else { max_tree_cost + 1.0 };
        let target_cost = rng.gen_range(0.0..=cost_cap);

        // Nearest neighbor in (state, cost), skipping nodes over the bound.
        let mut best = None;
        for (i, node) in tree.iter().enumerate() {
            if node.cost_to_come >= bound {
                continue;
            }
            let d = scene.metric(&node.state, &target_state)
                + cfg.cost_weight * (node.cost_to_come - target_cost).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let Some((near, _)) = best else { break };

        let u = DVector::from_iterator(
            d_u,
            scene
                .control_lo
                .iter()
                .zip(scene.control_hi.iter())
                .map(|(&lo, &hi)| rng.gen_range(lo..=hi)),
        );
        let steps = rng.gen_range(1..=cfg.max_edge_steps);
        let duration = steps as f64 * scene.dt;
        let edge_cost = u.norm() * duration;
        let new_cost = tree[near].cost_to_come + edge_cost;
        if new_cost >= bound {
            continue;
        }
        let path = euler_edge(&scene.model, &tree[near].state, &u, steps, scene.dt);
        if !path.iter().all(|x| scene.clear_of_obstacles(x) && x.iter().all(|v| v.is_finite())) {
            continue;
        }
        let state = path.last().expect("steps >= 1").clone();
        tree.push(TreeNode {
            state: state.clone(),
            parent: Some(near),
            edge_control: u,
            edge_duration: duration,
            cost_to_come: new_cost,
        });
        max_tree_cost = max_tree_cost.max(new_cost);
        if scene.in_goal(&state) {
            solutions.push((tree.len() - 1, new_cost));
            bound = new_cost;
        }
    }
    Ok((tree, solutions))
}

/// Expands the tree path ending at `leaf` into per-`dt` controls and
/// re-integrated states.
fn unroll(
    scene: &PlannerScene,
    tree: &[TreeNode],
    leaf: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut chain = Vec::new();
    let mut at = leaf;
    while let Some(parent) = tree[at].parent {
        chain.push(at);
        at = parent;
    }
    chain.reverse();
    let mut controls = Vec::new();
    for &i in &chain {
        let steps = (tree[i].edge_duration / scene.dt).round() as usize;
        for _ in 0..steps {
            controls.push(tree[i].edge_control.clone());
        }
    }
    let mut states = vec![scene.x0.clone()];
    for u in &controls {
        let next = euler_edge(&scene.model, states.last().expect("nonempty"), u, 1, scene.dt);
        states.push(next.into_iter().next().expect("one step"));
    }
    (states, controls)
}

/// Grows the tree until the node budget is spent and returns the cheapest
/// goal-reaching trajectory at fixed `dt` resolution.
pub fn ao_rrt(
    scene: &PlannerScene,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<AoRrtResult, PlannerError> {
    let (tree, solutions) = grow(scene, cfg, seed)?;
    let Some(&(leaf, _)) = solutions.last() else {
        return Err(PlannerError::NoSolution { nodes: tree.len() });
    };
    let (states, controls) = unroll(scene, &tree, leaf);
    Ok(AoRrtResult {
        states,
        controls,
        solution_costs: solutions.iter().map(|&(_, c)| c).collect(),
        nodes_expanded: tree.len(),
    })
}
