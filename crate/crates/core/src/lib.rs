//! Chance-constrained trajectory optimization under stochastic nonlinear
//! dynamics: a polynomial-chaos projection of the stochastic problem into a
//! deterministic convex surrogate, solved by trust-region sequential convex
//! programming over an interior-point conic solver, with seeded Monte-Carlo
//! validation of the planned trajectories.

pub mod basis;
pub mod cli;
pub mod constraints;
pub mod mc;
pub mod models;
pub mod pc;
pub mod planner;
pub mod projection;
pub mod scenario;
pub mod scp;
