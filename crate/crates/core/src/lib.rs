//! Budgeted tree-structured exploration for group-relative policy
//! optimization, on small POMDPs whose ground truth is known exactly.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the runner uses.

pub mod baselines;
pub mod config;
pub mod env;
pub mod experiment;
pub mod forest;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod scalar;

pub use scalar::Scalar;

pub type Policy = policy::PolicyParams<f64>;
pub type Decision = policy::StepDecision<f64>;
pub type Forest = forest::TrajectoryForest<f64>;
pub type Node = forest::ForestNode<f64>;
