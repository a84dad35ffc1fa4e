use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, grow_arm, initial_policy, resolve_p_branch, train, ExperimentError};
use crate::config::{Arm, ConfigError, ExperimentConfig};
use crate::forest::TrajectoryGroup;
use crate::metrics::{
    group_steps, repetitive_action_ratio, wilcoxon_signed_rank, Alternative, MetricsError,
};
use crate::rollout::{RolloutError, RolloutSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub fingerprint: String,
    pub p_branch: Option<f64>,
    /// Tasks with at least one successful leaf.
    pub discovery_rate: f64,
    pub leaf_success: f64,
    pub mean_group_size: f64,
    pub tree_steps: usize,
    pub chain_steps: usize,
    pub branch_events: usize,
    pub repetitive_ratio: f64,
    /// Mean over training seeds of the policy's single-episode success.
    pub eval_success: f64,
    /// Per task, discovery averaged over training seeds.
    pub scores: Vec<f64>,
}

impl ArmReport {
    /// Generated steps per 100 chain-equivalent steps.
    pub fn token_efficiency(&self) -> f64 {
        100.0 * self.tree_steps as f64 / self.chain_steps.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub reference: Arm,
    pub baseline: Arm,
    /// Reference discovery rate minus the baseline's.
    pub delta: f64,
    pub w: Option<f64>,
    /// One-sided: the reference discovers more.
    pub p_greater: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub task_seeds: Vec<u64>,
    pub training_seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    pub tests: Vec<PairedTest>,
}

impl CompareReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn render(&self, header: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for a in &self.arms {
            if let Some(p) = a.p_branch {
                let _ = writeln!(out, "# {}.p_branch = {p}", a.arm);
            }
        }
        out.push_str("arm,discovery_rate,leaf_success,mean_group_size,token_efficiency,repetitive_ratio,eval_success,branch_events\n");
        for a in &self.arms {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.4},{:.6},{:.6},{}",
                a.arm,
                a.discovery_rate,
                a.leaf_success,
                a.mean_group_size,
                a.token_efficiency(),
                a.repetitive_ratio,
                a.eval_success,
                a.branch_events
            );
        }
        out.push_str("\nreference,baseline,delta,w,p_greater,p_two_sided,notice\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        for t in &self.tests {
            let _ = writeln!(
                out,
                "{},{},{:+.6},{},{},{},{}",
                t.reference,
                t.baseline,
                t.delta,
                t.w.map(|w| w.to_string()).unwrap_or_default(),
                opt(t.p_greater),
                opt(t.p_two_sided),
                t.notice.as_deref().unwrap_or("")
            );
        }
        out
    }
}

/// Expands a single config into the three arms; several configs are taken
/// as given and must agree on seeds and tasks.
pub fn arm_configs(configs: &[ExperimentConfig]) -> Result<Vec<ExperimentConfig>, ExperimentError> {
    match configs {
        [] => Err(ConfigError::Invalid("no configuration to compare".into()).into()),
        [one] => Ok(Arm::ALL.iter().map(|&arm| ExperimentConfig { arm, ..one.clone() }).collect()),
        many => {
            let first = &many[0];
            for c in &many[1..] {
                if c.seeds != first.seeds || c.tasks != first.tasks || c.task_seed != first.task_seed {
                    return Err(ConfigError::Invalid("mismatched seed sets across compared configs".into()).into());
                }
            }
            Ok(many.to_vec())
        }
    }
}

fn run_arm(config: &ExperimentConfig, task_seeds: &[u64]) -> Result<ArmReport, ExperimentError> {
    let mut scores = vec![0.0; task_seeds.len()];
    let mut groups: Vec<TrajectoryGroup> = Vec::new();
    let mut steps = Vec::new();
    let (mut tree, mut chain, mut events) = (0, 0, 0);
    let mut eval = 0.0;
    let mut p_used = None;
    for &seed in &config.seeds {
        let policy = if config.iterations > 0 {
            train(config, seed, |_| {})?.policy
        } else {
            initial_policy(config)?
        };
        eval += evaluate(config, &policy, seed)?;
        let p = match config.arm {
            Arm::Fixed => Some(resolve_p_branch(config, &policy, seed)?),
            _ => None,
        };
        p_used = p.or(p_used);
        let results: Result<Vec<_>, RolloutError> = task_seeds
            .par_iter()
            .map(|&task| {
                let forest = grow_arm(config, config.arm, p.unwrap_or(0.0), &policy, task, seed)?;
                let group = forest.extract_group(task)?;
                let trajectories = group_steps(&forest, &group);
                Ok((RolloutSummary::of(&forest, task), group, trajectories))
            })
            .collect();
        for (i, (summary, group, trajectories)) in results?.into_iter().enumerate() {
            scores[i] += (group.successes() > 0) as u8 as f64;
            tree += summary.tree_steps;
            chain += summary.chain_steps;
            events += summary.branch_events;
            steps.extend(trajectories);
            groups.push(group);
        }
    }
    let runs = config.seeds.len() as f64;
    scores.iter_mut().for_each(|s| *s /= runs);
    let rates = crate::metrics::success_rate(&groups)?;
    let leaves: usize = groups.iter().map(|g| g.len()).sum();
    Ok(ArmReport {
        arm: config.arm,
        fingerprint: config.fingerprint(),
        p_branch: p_used,
        discovery_rate: rates.task_level,
        leaf_success: rates.leaf_level,
        mean_group_size: leaves as f64 / groups.len() as f64,
        tree_steps: tree,
        chain_steps: chain,
        branch_events: events,
        repetitive_ratio: repetitive_action_ratio(&steps)?,
        eval_success: eval / runs,
        scores,
    })
}

/// Runs every arm on the same task seeds and tests the reference (the
/// first spark arm, else the first config) against each other arm.
pub fn compare(configs: &[ExperimentConfig]) -> Result<CompareReport, ExperimentError> {
    let arms = arm_configs(configs)?;
    for c in &arms {
        c.validate()?;
    }
    let first = &arms[0];
    let task_seeds: Vec<u64> = (0..first.tasks as u64).map(|i| first.task_seed + i).collect();
    let reports = arms.iter().map(|c| run_arm(c, &task_seeds)).collect::<Result<Vec<_>, _>>()?;

    let reference = reports.iter().position(|r| r.arm == Arm::Spark).unwrap_or(0);
    let ours = &reports[reference];
    let mut tests = Vec::new();
    for (_, other) in reports.iter().enumerate().filter(|(i, _)| *i != reference) {
        let mut test = PairedTest {
            reference: ours.arm,
            baseline: other.arm,
            delta: ours.discovery_rate - other.discovery_rate,
            w: None,
            p_greater: None,
            p_two_sided: None,
            notice: None,
        };
        match (
            wilcoxon_signed_rank(&ours.scores, &other.scores, Alternative::Greater),
            wilcoxon_signed_rank(&ours.scores, &other.scores, Alternative::TwoSided),
        ) {
            (Ok(g), Ok(t)) => {
                test.w = Some(t.w);
                test.p_greater = Some(g.p_value);
                test.p_two_sided = Some(t.p_value);
            }
            (Err(e @ (MetricsError::Degenerate | MetricsError::InsufficientPairs(_))), _) => {
                test.notice = Some(e.to_string());
            }
            (Err(e), _) | (_, Err(e)) => return Err(e.into()),
        }
        tests.push(test);
    }
    Ok(CompareReport {
        task_seeds,
        training_seeds: first.seeds.clone(),
        arms: reports,
        tests,
    })
}
