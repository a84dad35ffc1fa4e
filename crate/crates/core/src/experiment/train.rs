use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, grow_arm, initial_policy, resolve_p_branch, ExperimentError};
use crate::config::{Arm, ExperimentConfig};
use crate::forest::TrajectoryGroup;
use crate::grpo::{
    apply_update, assign_rewards, group_advantages, group_terms, surrogate_loss_and_gradient, GroupTerms,
};
use crate::policy::PolicyParams;
use crate::rng::StreamSeed;
use crate::rollout::RolloutSummary;

pub const TRAINING_LOG_HEADER: &str = "iteration,arm,tasks,mean_group_size,mean_return,task_success,leaf_success,eval_success,loss,kl,clip_fraction,tree_steps,chain_steps,branch_events";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub arm: Arm,
    pub tasks: usize,
    pub mean_group_size: f64,
    pub mean_return: f64,
    pub task_success: f64,
    pub leaf_success: f64,
    /// Success probability of the policy after this iteration's update.
    pub eval_success: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub tree_steps: usize,
    pub chain_steps: usize,
    pub branch_events: usize,
}

impl IterationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9},{:.6},{},{},{}",
            self.iteration,
            self.arm,
            self.tasks,
            self.mean_group_size,
            self.mean_return,
            self.task_success,
            self.leaf_success,
            self.eval_success,
            self.loss,
            self.kl,
            self.clip_fraction,
            self.tree_steps,
            self.chain_steps,
            self.branch_events
        )
    }
}

#[derive(Debug)]
pub struct TrainingRun {
    pub seed: u64,
    pub p_branch: Option<f64>,
    pub initial: PolicyParams<f64>,
    /// Last parameters that passed every numeric check.
    pub policy: PolicyParams<f64>,
    pub initial_success: f64,
    pub log: Vec<IterationRow>,
    /// Set when training stopped on a numeric fault.
    pub fault: Option<ExperimentError>,
}

impl TrainingRun {
    pub fn final_success(&self) -> f64 {
        self.log.last().map_or(self.initial_success, |r| r.eval_success)
    }
}

/// Trains one policy with `config.arm`. `on_row` sees every log row as soon
/// as it is produced.
pub fn train(
    config: &ExperimentConfig,
    seed: u64,
    mut on_row: impl FnMut(&IterationRow),
) -> Result<TrainingRun, ExperimentError> {
    config.validate()?;
    let initial = initial_policy(config)?;
    let reference = initial.clone();
    let p_branch = match config.arm {
        Arm::Fixed => Some(resolve_p_branch(config, &initial, seed)?),
        _ => None,
    };
    let initial_success = evaluate(config, &initial, seed)?;
    let rewards = config.reward_spec();
    let optimizer = config.optimizer_spec();
    let stream = StreamSeed::new(seed).derive("train", 0);
    let per_iteration = config.tasks_per_iteration();

    let mut run = TrainingRun {
        seed,
        p_branch,
        initial: initial.clone(),
        policy: initial,
        initial_success,
        log: Vec::with_capacity(config.iterations),
        fault: None,
    };

    for iteration in 0..config.iterations {
        let round = stream.derive("iteration", iteration as u64);
        let behaviour = &run.policy;
        let batch: Result<Vec<_>, ExperimentError> = (0..per_iteration as u64)
            .into_par_iter()
            .map(|j| {
                let task = round.derive("task", j).value();
                let forest = grow_arm(config, config.arm, p_branch.unwrap_or(0.0), behaviour, task, round.value())?;
                let group = forest.extract_group(task).map_err(crate::rollout::RolloutError::from)?;
                let returns = assign_rewards(&group, &rewards);
                let advantages = if group.len() < 2 {
                    vec![0.0; group.len()]
                } else {
                    group_advantages(&returns, optimizer.advantage_epsilon)?
                };
                let terms = group_terms(&forest, &group, &advantages, optimizer.credit)?;
                Ok((RolloutSummary::of(&forest, task), group, returns, terms))
            })
            .collect();
        let batch = batch?;

        let groups: Vec<GroupTerms<f64>> = batch.iter().map(|b| b.3.clone()).collect();
        let mut params = run.policy.clone();
        let mut loss = 0.0;
        let mut kl = 0.0;
        let mut clip_fraction = 0.0;
        let mut failed = None;
        for epoch in 0..config.update_epochs {
            let step = surrogate_loss_and_gradient(&groups, &params, &reference, &optimizer)
                .and_then(|out| apply_update(&params, &out.gradient, optimizer.step_size).map(|p| (p, out)));
            match step {
                Ok((next, out)) => {
                    if epoch == 0 {
                        loss = out.loss;
                        kl = out.kl;
                        clip_fraction = out.clip_fraction;
                    }
                    params = next;
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            run.fault = Some(e.into());
            break;
        }
        let eval_success = evaluate(config, &params, seed)?;
        if !(0.0..=1.0).contains(&eval_success) {
            run.fault = Some(ExperimentError::NonFinite("success probability"));
            break;
        }
        run.policy = params;

        let summaries: Vec<&RolloutSummary> = batch.iter().map(|b| &b.0).collect();
        let group_list: Vec<&TrajectoryGroup> = batch.iter().map(|b| &b.1).collect();
        let leaves: usize = group_list.iter().map(|g| g.len()).sum();
        let row = IterationRow {
            iteration: iteration + 1,
            arm: config.arm,
            tasks: batch.len(),
            mean_group_size: leaves as f64 / batch.len() as f64,
            mean_return: batch.iter().flat_map(|b| b.2.iter()).sum::<f64>() / leaves.max(1) as f64,
            task_success: group_list.iter().filter(|g| g.successes() > 0).count() as f64 / batch.len() as f64,
            leaf_success: group_list.iter().map(|g| g.successes()).sum::<usize>() as f64 / leaves.max(1) as f64,
            eval_success,
            loss,
            kl,
            clip_fraction,
            tree_steps: summaries.iter().map(|s| s.tree_steps).sum(),
            chain_steps: summaries.iter().map(|s| s.chain_steps).sum(),
            branch_events: summaries.iter().map(|s| s.branch_events).sum(),
        };
        on_row(&row);
        run.log.push(row);
    }
    Ok(run)
}
