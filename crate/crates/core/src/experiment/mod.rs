//! Training, comparison and coverage experiments built from an
//! [`ExperimentConfig`].
//!
//! Task-level work is spread over a rayon pool and merged in task order, so
//! results never depend on the worker count.

mod commands;
mod compare;
mod theory;
mod train;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{calibrate_fixed_probability, run_fixed_probability_forest, run_uniform_forest};
use crate::config::{Arm, ConfigError, ExperimentConfig};
use crate::env::{EnvSpec, Environment};
use crate::forest::TrajectoryForest;
use crate::grpo::GrpoError;
use crate::metrics::MetricsError;
use crate::policy::{
    exact_success_probability, fit_explore_head, oracle_explore_labels, search_explore_labels,
    HistoryWindow, PolicyError, PolicyParams,
};
use crate::rng::StreamSeed;
use crate::rollout::{run_episode_forest, RolloutError, RolloutSummary};

pub use commands::{cmd_compare, cmd_rollout, cmd_theory, cmd_train, starting_policy, CommandOutput};
pub use compare::{compare, ArmReport, CompareReport, PairedTest};
pub use theory::{coverage_table, CoverageCell, COVERAGE_BRANCHING, COVERAGE_Q};
pub use train::{train, IterationRow, TrainingRun, TRAINING_LOG_HEADER};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl ExperimentError {
    /// Numeric faults (non-finite loss or gradient) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ExperimentError::NonFinite(_)
                | ExperimentError::Grpo(
                    GrpoError::NonFiniteLoss | GrpoError::NonFiniteGradient | GrpoError::MissingLogProb(_)
                )
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Rollout(RolloutError::Config(_))
                | ExperimentError::Policy(PolicyError::Format(_))
        )
    }
}

/// Runs `f` on a pool of `workers` threads (0: rayon's default).
pub fn with_workers<R: Send>(
    workers: usize,
    f: impl FnOnce() -> R + Send,
) -> Result<R, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Zero-initialized policy, with the explore head fitted to oracle labels
/// when `cold_start` is set.
pub fn initial_policy(config: &ExperimentConfig) -> Result<PolicyParams<f64>, ExperimentError> {
    config.validate()?;
    let env = config.env_spec();
    let params = PolicyParams::new(env.num_actions(), config.temperature)?;
    if !config.cold_start {
        return Ok(params);
    }
    let labels = match &env {
        EnvSpec::KeyStateChain(_) => {
            oracle_explore_labels(&env, &params, config.history_length, config.branch_semantics)?
        }
        EnvSpec::ObjectSearch(spec) => search_explore_labels(spec, config.history_length)?,
    };
    Ok(fit_explore_head(&params, &labels, config.cold_start_passes, 1.0)?)
}

/// Probability that one sampled episode succeeds: exact on the chain,
/// Monte Carlo over `eval_episodes` tasks otherwise.
pub fn evaluate(
    config: &ExperimentConfig,
    params: &PolicyParams<f64>,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let env = config.env_spec();
    if let EnvSpec::KeyStateChain(_) = env {
        return Ok(exact_success_probability(&env, params, config.history_length)?);
    }
    let stream = StreamSeed::new(seed).derive("eval", 0);
    let episodes = config.eval_episodes.max(1);
    let wins: Result<Vec<bool>, ExperimentError> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let task = stream.derive("task", i as u64).value();
            let mut rng = stream.derive("episode", i as u64).rng();
            let (_, success) = sample_episode(&env, params, config.history_length, task, &mut rng)?;
            Ok(success)
        })
        .collect();
    Ok(wins?.iter().filter(|&&w| w).count() as f64 / episodes as f64)
}

/// One on-policy episode as `(key, action)` steps, plus its success.
pub fn sample_episode<R: Rng>(
    env: &EnvSpec,
    params: &PolicyParams<f64>,
    history_length: usize,
    task_seed: u64,
    rng: &mut R,
) -> Result<(Vec<(crate::policy::HistoryKey, crate::env::ActionId)>, bool), ExperimentError> {
    let (mut snapshot, obs) = env.reset(task_seed).map_err(RolloutError::from)?;
    let mut window = HistoryWindow::start(obs);
    let mut steps = Vec::new();
    for _ in 0..env.horizon() {
        let key = window.key();
        let decision = params.decide(&key, rng);
        let (next, outcome) = env.step(&snapshot, decision.action).map_err(RolloutError::from)?;
        steps.push((key, decision.action));
        if outcome.terminal {
            return Ok((steps, outcome.success));
        }
        window = window.advance(decision.action, outcome.observation, history_length);
        snapshot = next;
    }
    Ok((steps, false))
}

/// Forest for one task under the given arm.
pub fn grow_arm(
    config: &ExperimentConfig,
    arm: Arm,
    p_branch: f64,
    params: &PolicyParams<f64>,
    task_seed: u64,
    seed: u64,
) -> Result<TrajectoryForest<f64>, RolloutError> {
    let env = config.env_spec();
    let settings = config.rollout_settings(seed);
    match arm {
        Arm::Spark => run_episode_forest(&env, task_seed, params, &settings),
        Arm::Uniform => run_uniform_forest(&env, task_seed, params, &settings),
        Arm::Fixed => run_fixed_probability_forest(&env, task_seed, params, &settings, p_branch),
    }
}

/// Fixed-arm probability: the configured value, or the branch-request rate
/// of spark rollouts of `params` over the `tasks` calibration seeds.
pub fn resolve_p_branch(
    config: &ExperimentConfig,
    params: &PolicyParams<f64>,
    seed: u64,
) -> Result<f64, ExperimentError> {
    if let Some(p) = config.p_branch {
        return Ok(p);
    }
    let stream = StreamSeed::new(seed).derive("calibration", 0);
    let logs: Result<Vec<RolloutSummary>, RolloutError> = (0..config.tasks.max(100) as u64)
        .into_par_iter()
        .map(|i| {
            let task = stream.derive("task", i).value();
            grow_arm(config, Arm::Spark, 0.0, params, task, seed).map(|f| RolloutSummary::of(&f, task))
        })
        .collect();
    Ok(calibrate_fixed_probability(&logs?)?)
}
