//! Group-relative policy update over trajectory forests.
//!
//! Each leaf's return is standardized within its group and credited to every
//! step on its root-to-leaf path. The loss is the clipped surrogate plus an
//! exact per-key KL penalty against a frozen reference, with gradients taken
//! analytically over the tabular logits.

mod gradient;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ActionId;
use crate::forest::{ForestError, TrajectoryForest, TrajectoryGroup};
use crate::policy::{HistoryKey, PolicyParams, LOGIT_CAP};
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

pub use gradient::PolicyGradient;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group of {0} leaves is too small to normalize")]
    DegenerateGroup(usize),
    #[error("advantage count {found} does not match group size {expected}")]
    AdvantageCount { expected: usize, found: usize },
    #[error("missing or non-finite behaviour log-probability at key {0}")]
    MissingLogProb(HistoryKey),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid optimizer setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec<T> {
    pub success_reward: T,
    pub failure_reward: T,
    pub invalid_action_penalty: T,
    /// Kept for completeness; returns are undiscounted.
    pub discount: T,
}

impl<T: Scalar> Default for RewardSpec<T> {
    fn default() -> Self {
        RewardSpec {
            success_reward: T::of(10.0),
            failure_reward: T::zero(),
            invalid_action_penalty: T::of(-0.1),
            discount: T::of(0.99),
        }
    }
}

impl<T: Scalar> RewardSpec<T> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.success_reward > self.failure_reward && self.success_reward.is_finite()) {
            return Err(GrpoError::Invalid("success reward must exceed failure reward".into()));
        }
        if !(self.discount >= T::zero() && self.discount < T::one()) {
            return Err(GrpoError::Invalid("discount must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// How a shared step is credited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credit {
    /// One term per descendant leaf, as if the forest were `|G|` chains.
    #[default]
    Flatten,
    /// One term per node, carrying the mean advantage of its leaves.
    NodeMean,
}

impl std::str::FromStr for Credit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flatten" => Ok(Credit::Flatten),
            "node_mean" => Ok(Credit::NodeMean),
            other => Err(format!("unknown credit mode `{other}`")),
        }
    }
}

impl std::fmt::Display for Credit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Credit::Flatten => "flatten",
            Credit::NodeMean => "node_mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec<T> {
    pub clip_epsilon: T,
    pub kl_coefficient: T,
    pub step_size: T,
    pub advantage_epsilon: T,
    /// Include the explore flag's log-probability in the ratio.
    pub flag_in_objective: bool,
    pub credit: Credit,
}

impl<T: Scalar> Default for OptimizerSpec<T> {
    fn default() -> Self {
        OptimizerSpec {
            clip_epsilon: T::of(0.2),
            kl_coefficient: T::of(0.01),
            step_size: T::of(0.5),
            advantage_epsilon: T::of(1e-8),
            flag_in_objective: true,
            credit: Credit::Flatten,
        }
    }
}

impl<T: Scalar> OptimizerSpec<T> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > T::zero() && self.clip_epsilon < T::one()) {
            return Err(GrpoError::Invalid("clip epsilon must lie in (0, 1)".into()));
        }
        if !(self.kl_coefficient >= T::zero() && self.kl_coefficient.is_finite()) {
            return Err(GrpoError::Invalid("KL coefficient must be finite and non-negative".into()));
        }
        if !(self.step_size > T::zero() && self.step_size.is_finite()) {
            return Err(GrpoError::Invalid("step size must be positive".into()));
        }
        if !(self.advantage_epsilon >= T::zero() && self.advantage_epsilon.is_finite()) {
            return Err(GrpoError::Invalid("advantage epsilon must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-leaf undiscounted return.
pub fn assign_rewards<T: Scalar>(group: &TrajectoryGroup, spec: &RewardSpec<T>) -> Vec<T> {
    group
        .success
        .iter()
        .zip(&group.invalid_steps)
        .map(|(&ok, &invalid)| {
            let base = if ok { spec.success_reward } else { spec.failure_reward };
            base + spec.invalid_action_penalty * T::of_usize(invalid)
        })
        .collect()
}

/// `(R_i - mean) / (population std + eps)`.
pub fn group_advantages<T: Scalar>(returns: &[T], epsilon: T) -> Result<Vec<T>, GrpoError> {
    if returns.len() < 2 {
        return Err(GrpoError::DegenerateGroup(returns.len()));
    }
    // Exact check: a rounded mean of equal values can still differ from them.
    if returns.iter().all(|&r| r == returns[0]) {
        return Ok(vec![T::zero(); returns.len()]);
    }
    let n = T::of_usize(returns.len());
    let mean = returns.iter().copied().sum::<T>() / n;
    let var = returns.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    Ok(returns.iter().map(|&r| (r - mean) / (std + epsilon)).collect())
}

/// One credited step: the behaviour decision at `key` and its advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTerm<T> {
    pub key: HistoryKey,
    pub action: ActionId,
    pub flag: bool,
    pub old_logprob_action: T,
    pub old_logprob_flag: T,
    pub advantage: T,
}

/// The credited steps of one group and the keys it visited.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTerms<T> {
    pub terms: Vec<SurrogateTerm<T>>,
    pub keys: BTreeSet<HistoryKey>,
}

/// Flattens a finished forest into surrogate terms.
pub fn group_terms<T: Scalar>(
    forest: &TrajectoryForest<T>,
    group: &TrajectoryGroup,
    advantages: &[T],
    credit: Credit,
) -> Result<GroupTerms<T>, GrpoError> {
    if advantages.len() != group.len() {
        return Err(GrpoError::AdvantageCount { expected: group.len(), found: advantages.len() });
    }
    let term = |id: usize, advantage: T| -> Result<SurrogateTerm<T>, GrpoError> {
        let node = forest.node(id)?;
        Ok(SurrogateTerm {
            key: node.history_key.clone(),
            action: node.decision.action,
            flag: node.decision.explore_flag,
            old_logprob_action: node.decision.logprob_action,
            old_logprob_flag: node.decision.logprob_flag,
            advantage,
        })
    };
    let mut terms = Vec::new();
    match credit {
        Credit::Flatten => {
            for (path, &adv) in group.paths.iter().zip(advantages) {
                for &id in path {
                    terms.push(term(id, adv)?);
                }
            }
        }
        Credit::NodeMean => {
            let mut sums = vec![(T::zero(), 0usize); forest.nodes().len()];
            for (path, &adv) in group.paths.iter().zip(advantages) {
                for &id in path {
                    sums[id].0 = sums[id].0 + adv;
                    sums[id].1 += 1;
                }
            }
            for (id, &(sum, count)) in sums.iter().enumerate() {
                if count > 0 {
                    terms.push(term(id, sum / T::of_usize(count))?);
                }
            }
        }
    }
    let keys = terms.iter().map(|t| t.key.clone()).collect();
    Ok(GroupTerms { terms, keys })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput<T> {
    pub loss: T,
    pub kl: T,
    /// Fraction of terms whose clipped branch was active.
    pub clip_fraction: T,
    pub gradient: PolicyGradient<T>,
}

fn action_kl<T: Scalar>(p: &[T], log_p: &[T], log_q: &[T]) -> T {
    p.iter().zip(log_p).zip(log_q).map(|((&pi, &lp), &lq)| pi * (lp - lq)).sum()
}

fn bernoulli_kl<T: Scalar>(x: T, x_ref: T) -> T {
    let s = sigmoid(x);
    let (lp1, lp0) = (log_sigmoid(x), log_sigmoid(-x));
    let (lq1, lq0) = (log_sigmoid(x_ref), log_sigmoid(-x_ref));
    s * (lp1 - lq1) + (T::one() - s) * (lp0 - lq0)
}

/// Loss and gradient averaged over groups.
///
/// Per group: `-sum_terms min(r A, clip(r) A) + beta * sum_keys KL(pi || pi_ref)`.
pub fn surrogate_loss_and_gradient<T: Scalar>(
    groups: &[GroupTerms<T>],
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    spec: &OptimizerSpec<T>,
) -> Result<SurrogateOutput<T>, GrpoError> {
    let temperature = params.temperature;
    let lo = T::one() - spec.clip_epsilon;
    let hi = T::one() + spec.clip_epsilon;
    let mut gradient = PolicyGradient::default();
    let (mut loss, mut kl_total, mut clipped, mut count) = (T::zero(), T::zero(), 0usize, 0usize);
    let scale = if groups.is_empty() { T::zero() } else { T::one() / T::of_usize(groups.len()) };

    for group in groups {
        for term in &group.terms {
            if !(term.old_logprob_action.is_finite() && term.old_logprob_flag.is_finite()) {
                return Err(GrpoError::MissingLogProb(term.key.clone()));
            }
            let log_probs = params.action_log_probs(&term.key);
            let mut new_lp = log_probs[term.action.0];
            let mut old_lp = term.old_logprob_action;
            if spec.flag_in_objective {
                new_lp = new_lp + params.flag_log_prob(&term.key, term.flag);
                old_lp = old_lp + term.old_logprob_flag;
            }
            let ratio = (new_lp - old_lp).exp();
            let a = term.advantage;
            let unclipped = ratio * a;
            let clipped_value = ratio.max(lo).min(hi) * a;
            count += 1;
            if clipped_value < unclipped {
                clipped += 1;
                loss = loss - clipped_value * scale;
                continue;
            }
            loss = loss - unclipped * scale;
            // d(-r A)/dtheta = -A r dlogpi/dtheta
            let coeff = -a * ratio * scale;
            if coeff == T::zero() {
                continue;
            }
            let probs: Vec<T> = log_probs.iter().map(|lp| lp.exp()).collect();
            let g = gradient.action_entry(&term.key, params.num_actions);
            for (j, (gj, &pj)) in g.iter_mut().zip(&probs).enumerate() {
                let onehot = if j == term.action.0 { T::one() } else { T::zero() };
                *gj = *gj + coeff * (onehot - pj) / temperature;
            }
            if spec.flag_in_objective {
                let s = params.explore_probability(&term.key);
                let y = if term.flag { T::one() } else { T::zero() };
                let e = gradient.explore_entry(&term.key);
                *e = *e + coeff * (y - s);
            }
        }

        if spec.kl_coefficient > T::zero() {
            let beta = spec.kl_coefficient * scale;
            for key in &group.keys {
                let log_p = params.action_log_probs(key);
                let log_q = reference.action_log_probs(key);
                let p: Vec<T> = log_p.iter().map(|v| v.exp()).collect();
                let kl_a = action_kl(&p, &log_p, &log_q);
                kl_total = kl_total + kl_a * scale;
                loss = loss + beta * kl_a;
                let g = gradient.action_entry(key, params.num_actions);
                for j in 0..p.len() {
                    g[j] = g[j] + beta * p[j] * ((log_p[j] - log_q[j]) - kl_a) / temperature;
                }
                if spec.flag_in_objective {
                    let (x, x_ref) = (params.explore_logit(key), reference.explore_logit(key));
                    let kl_f = bernoulli_kl(x, x_ref);
                    kl_total = kl_total + kl_f * scale;
                    loss = loss + beta * kl_f;
                    let s = sigmoid(x);
                    let e = gradient.explore_entry(key);
                    *e = *e + beta * s * (T::one() - s) * (x - x_ref);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(GrpoError::NonFiniteLoss);
    }
    let clip_fraction = if count == 0 { T::zero() } else { T::of_usize(clipped) / T::of_usize(count) };
    Ok(SurrogateOutput { loss, kl: kl_total, clip_fraction, gradient })
}

/// Single-forest convenience wrapper.
pub fn forest_surrogate<T: Scalar>(
    forest: &TrajectoryForest<T>,
    group: &TrajectoryGroup,
    advantages: &[T],
    params: &PolicyParams<T>,
    reference: &PolicyParams<T>,
    spec: &OptimizerSpec<T>,
) -> Result<SurrogateOutput<T>, GrpoError> {
    let terms = group_terms(forest, group, advantages, spec.credit)?;
    surrogate_loss_and_gradient(std::slice::from_ref(&terms), params, reference, spec)
}

/// `params - step_size * gradient`, logits clamped to `±LOGIT_CAP`.
pub fn apply_update<T: Scalar>(
    params: &PolicyParams<T>,
    gradient: &PolicyGradient<T>,
    step_size: T,
) -> Result<PolicyParams<T>, GrpoError> {
    if !gradient.is_finite() {
        return Err(GrpoError::NonFiniteGradient);
    }
    let cap = T::of(LOGIT_CAP);
    let mut next = params.clone();
    for (key, g) in &gradient.action {
        let mut logits = next.logits(key);
        for (x, &gj) in logits.iter_mut().zip(g) {
            *x = (*x - step_size * gj).max(-cap).min(cap);
        }
        next.set_logits(key.clone(), logits);
    }
    for (key, &g) in &gradient.explore {
        let x = (next.explore_logit(key) - step_size * g).max(-cap).min(cap);
        next.set_explore_logit(key.clone(), x);
    }
    Ok(next)
}

#[cfg(test)]
mod tests;
