//! Flat `key = value` experiment configuration.
//!
//! Every tunable lives in [`ExperimentConfig`]. Files are parsed line by
//! line (`#` starts a comment); unknown keys are rejected. The resolved
//! config renders back to the same format and its SHA-256 is the run
//! fingerprint embedded in every output.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EnvSpec, Environment, KeyStateChainSpec, ObjectSearchSpec};
use crate::grpo::{Credit, OptimizerSpec, RewardSpec};
use crate::rollout::{BranchSemantics, RolloutSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    #[default]
    Spark,
    Uniform,
    Fixed,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Spark, Arm::Uniform, Arm::Fixed];
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spark" => Ok(Arm::Spark),
            "uniform" => Ok(Arm::Uniform),
            "fixed" => Ok(Arm::Fixed),
            other => Err(format!("unknown arm `{other}` (spark, uniform, fixed)")),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Spark => "spark",
            Arm::Uniform => "uniform",
            Arm::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    KeystateChain,
    ObjectSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub horizon: usize,
    pub pivotal_steps: Vec<usize>,
    pub actions: usize,
    /// Per pivotal step; empty means action 0 at each.
    pub desirable: Vec<Vec<usize>>,
    pub locations: usize,
    pub target_location: Option<usize>,
    pub budget: usize,
    pub roots: usize,
    pub branching: usize,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub batch_size: usize,
    /// Share of `batch_size` tasks drawn per iteration.
    pub data_fraction: f64,
    /// Paired task seeds for `rollout` summaries and `compare`.
    pub tasks: usize,
    pub task_seed: u64,
    pub temperature: f64,
    pub step_size: f64,
    pub kl_coefficient: f64,
    pub clip_epsilon: f64,
    pub advantage_epsilon: f64,
    pub success_reward: f64,
    pub failure_reward: f64,
    pub invalid_action_penalty: f64,
    pub discount: f64,
    pub arm: Arm,
    /// Fixed-arm probability; `None` calibrates from spark rollouts.
    pub p_branch: Option<f64>,
    pub branch_semantics: BranchSemantics,
    pub history_length: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide. Never affects results.
    pub workers: usize,
    pub update_epochs: usize,
    pub cold_start: bool,
    pub cold_start_passes: usize,
    pub flag_in_objective: bool,
    pub credit: Credit,
    /// Monte Carlo episodes for evaluating object-search policies.
    pub eval_episodes: usize,
    /// Monte Carlo trials per coverage cell.
    pub trials: usize,
    /// Checkpoint to start from instead of the initial policy.
    pub policy: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvKind::KeystateChain,
            horizon: 6,
            pivotal_steps: vec![0, 3],
            actions: 4,
            desirable: Vec::new(),
            locations: 4,
            target_location: None,
            budget: 8,
            roots: 4,
            branching: 2,
            seeds: vec![0, 1, 2, 3, 4],
            iterations: 200,
            batch_size: 16,
            data_fraction: 1.0,
            tasks: 200,
            task_seed: 0,
            temperature: 0.4,
            step_size: 0.05,
            kl_coefficient: 0.01,
            clip_epsilon: 0.2,
            advantage_epsilon: 1e-8,
            success_reward: 10.0,
            failure_reward: 0.0,
            invalid_action_penalty: -0.1,
            discount: 0.99,
            arm: Arm::Spark,
            p_branch: None,
            branch_semantics: BranchSemantics::Continuation,
            history_length: 5,
            output_dir: PathBuf::from("out"),
            workers: 0,
            update_epochs: 1,
            cold_start: true,
            cold_start_passes: 200,
            flag_in_objective: true,
            credit: Credit::Flatten,
            eval_episodes: 256,
            trials: 10_000,
            policy: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), message: e.to_string() })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn auto_or<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "N" => "budget",
        "M" => "roots",
        "B" => "branching",
        "K" => "horizon",
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = canonical_key(key);
        match key {
            "env" => {
                self.env = match value {
                    "keystate_chain" => EnvKind::KeystateChain,
                    "object_search" => EnvKind::ObjectSearch,
                    other => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            message: format!("unknown environment `{other}`"),
                        })
                    }
                }
            }
            "horizon" => self.horizon = parse(key, value)?,
            "pivotal_steps" => self.pivotal_steps = parse_list(key, value)?,
            "actions" => self.actions = parse(key, value)?,
            "desirable" => {
                self.desirable = if value.trim().is_empty() || value == "auto" {
                    Vec::new()
                } else {
                    value.split(';').map(|set| parse_list(key, set)).collect::<Result<_, _>>()?
                }
            }
            "locations" => self.locations = parse(key, value)?,
            "target_location" => self.target_location = auto_or(key, value)?,
            "budget" => self.budget = parse(key, value)?,
            "roots" => self.roots = parse(key, value)?,
            "branching" => self.branching = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "data_fraction" => self.data_fraction = parse(key, value)?,
            "tasks" => self.tasks = parse(key, value)?,
            "task_seed" => self.task_seed = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "step_size" => self.step_size = parse(key, value)?,
            "kl_coefficient" => self.kl_coefficient = parse(key, value)?,
            "clip_epsilon" => self.clip_epsilon = parse(key, value)?,
            "advantage_epsilon" => self.advantage_epsilon = parse(key, value)?,
            "success_reward" => self.success_reward = parse(key, value)?,
            "failure_reward" => self.failure_reward = parse(key, value)?,
            "invalid_action_penalty" => self.invalid_action_penalty = parse(key, value)?,
            "discount" => self.discount = parse(key, value)?,
            "arm" => self.arm = parse(key, value)?,
            "p_branch" => self.p_branch = auto_or(key, value)?,
            "branch_semantics" => self.branch_semantics = parse(key, value)?,
            "history_length" => self.history_length = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "workers" => self.workers = parse(key, value)?,
            "update_epochs" => self.update_epochs = parse(key, value)?,
            "cold_start" => self.cold_start = parse(key, value)?,
            "cold_start_passes" => self.cold_start_passes = parse(key, value)?,
            "flag_in_objective" => self.flag_in_objective = parse(key, value)?,
            "credit" => self.credit = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "policy" => self.policy = (value != "init").then(|| PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let desirable = self.desirable.iter().map(|s| join(s)).collect::<Vec<_>>().join(";");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        vec![
            ("env", match self.env {
                EnvKind::KeystateChain => "keystate_chain".into(),
                EnvKind::ObjectSearch => "object_search".into(),
            }),
            ("horizon", self.horizon.to_string()),
            ("pivotal_steps", join(&self.pivotal_steps)),
            ("actions", self.actions.to_string()),
            ("desirable", if desirable.is_empty() { "auto".into() } else { desirable }),
            ("locations", self.locations.to_string()),
            ("target_location", opt(self.target_location.map(|t| t.to_string()))),
            ("budget", self.budget.to_string()),
            ("roots", self.roots.to_string()),
            ("branching", self.branching.to_string()),
            ("seeds", join(&self.seeds)),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("data_fraction", self.data_fraction.to_string()),
            ("tasks", self.tasks.to_string()),
            ("task_seed", self.task_seed.to_string()),
            ("temperature", self.temperature.to_string()),
            ("step_size", self.step_size.to_string()),
            ("kl_coefficient", self.kl_coefficient.to_string()),
            ("clip_epsilon", self.clip_epsilon.to_string()),
            ("advantage_epsilon", self.advantage_epsilon.to_string()),
            ("success_reward", self.success_reward.to_string()),
            ("failure_reward", self.failure_reward.to_string()),
            ("invalid_action_penalty", self.invalid_action_penalty.to_string()),
            ("discount", self.discount.to_string()),
            ("arm", self.arm.to_string()),
            ("p_branch", opt(self.p_branch.map(|p| p.to_string()))),
            ("branch_semantics", self.branch_semantics.to_string()),
            ("history_length", self.history_length.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("workers", self.workers.to_string()),
            ("update_epochs", self.update_epochs.to_string()),
            ("cold_start", self.cold_start.to_string()),
            ("cold_start_passes", self.cold_start_passes.to_string()),
            ("flag_in_objective", self.flag_in_objective.to_string()),
            ("credit", self.credit.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("trials", self.trials.to_string()),
            ("policy", self.policy.as_ref().map_or("init".into(), |p| p.display().to_string())),
        ]
    }

    /// Config file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the resolved config, excluding keys that cannot change
    /// results (`workers`, `output_dir`).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if k == "workers" || k == "output_dir" {
                continue;
            }
            hasher.update(format!("{k} = {v}\n"));
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Resolved config plus fingerprint, for output headers. Worker count
    /// and output location are left out so outputs stay byte-identical.
    pub fn provenance(&self) -> BTreeMap<String, String> {
        let mut map: BTreeMap<String, String> = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "workers" && *k != "output_dir")
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        map.insert("fingerprint".into(), self.fingerprint());
        map
    }

    pub fn env_spec(&self) -> EnvSpec {
        match self.env {
            EnvKind::KeystateChain => {
                let desirable = if self.desirable.is_empty() {
                    vec![vec![0]; self.pivotal_steps.len()]
                } else {
                    self.desirable.clone()
                };
                EnvSpec::KeyStateChain(KeyStateChainSpec {
                    horizon: self.horizon,
                    pivotal_steps: self.pivotal_steps.clone(),
                    actions: self.actions,
                    desirable,
                })
            }
            EnvKind::ObjectSearch => EnvSpec::ObjectSearch(ObjectSearchSpec {
                locations: self.locations,
                target_location: self.target_location,
                horizon: self.horizon,
            }),
        }
    }

    pub fn rollout_settings(&self, seed: u64) -> RolloutSettings {
        RolloutSettings {
            budget: self.budget,
            roots: self.roots,
            branching: self.branching,
            history_length: self.history_length,
            semantics: self.branch_semantics,
            seed,
        }
    }

    pub fn reward_spec(&self) -> RewardSpec<f64> {
        RewardSpec {
            success_reward: self.success_reward,
            failure_reward: self.failure_reward,
            invalid_action_penalty: self.invalid_action_penalty,
            discount: self.discount,
        }
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec<f64> {
        OptimizerSpec {
            clip_epsilon: self.clip_epsilon,
            kl_coefficient: self.kl_coefficient,
            step_size: self.step_size,
            advantage_epsilon: self.advantage_epsilon,
            flag_in_objective: self.flag_in_objective,
            credit: self.credit,
        }
    }

    /// Tasks drawn per training iteration.
    pub fn tasks_per_iteration(&self) -> usize {
        ((self.batch_size as f64 * self.data_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.env_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.roots == 0 || self.roots > self.budget {
            return bad(format!("need 1 <= roots <= budget (roots {}, budget {})", self.roots, self.budget));
        }
        if self.branching < 2 {
            return bad("branching must be at least 2".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive".into());
        }
        if self.p_branch.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return bad("p_branch must lie in [0, 1]".into());
        }
        if self.update_epochs == 0 {
            return bad("update_epochs must be at least 1".into());
        }
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        self.reward_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.optimizer_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
