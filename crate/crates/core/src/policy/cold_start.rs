//! Supervised cold start for the explore head.
//!
//! Labels come from exact uncertainties on the key-state chain, or from
//! annotated search paths on the object-search task. The head is fit by
//! per-key logistic regression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::uncertainty::epistemic_uncertainty;
use super::{HistoryKey, HistoryWindow, PolicyError, PolicyParams};
use crate::env::chain::ChainState;
use crate::env::{
    ActionId, EnvSpec, Environment, KeyStateChainSpec, ObjectSearchSpec, CONTENT_EMPTY, KIND_AT,
};
use crate::rollout::BranchSemantics;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleExploreLabel {
    pub key: HistoryKey,
    pub label: bool,
}

/// Non-terminal chain windows reachable under any action sequence, in step
/// order and key order within a step.
fn reachable_windows(spec: &KeyStateChainSpec, h: usize) -> Vec<(HistoryWindow, ChainState)> {
    let start = HistoryWindow::start(KeyStateChainSpec::observation(0, false));
    let mut level: BTreeMap<HistoryKey, (HistoryWindow, ChainState)> = BTreeMap::new();
    level.insert(start.key(), (start, ChainState { step: 0, derailed: false, terminal: false, seed: 0 }));
    let mut out = Vec::new();
    while !level.is_empty() {
        let mut next_level = BTreeMap::new();
        for (window, state) in level.values() {
            for a in 0..spec.actions {
                let (next, outcome) = spec.transition(*state, ActionId(a));
                if outcome.terminal {
                    continue;
                }
                let w = window.advance(ActionId(a), outcome.observation, h);
                next_level.entry(w.key()).or_insert((w, next));
            }
        }
        out.extend(level.into_values());
        level = next_level;
    }
    out
}

/// Threshold separating critical from routine uncertainties: the midpoint of
/// the gap when the two groups separate, else the 90th percentile of all
/// values (nearest rank).
pub fn uncertainty_threshold<T: Scalar>(pivotal: &[T], routine: &[T]) -> T {
    let max_routine = routine.iter().copied().fold(T::neg_infinity(), T::max);
    let min_pivotal = pivotal.iter().copied().fold(T::infinity(), T::min);
    if !pivotal.is_empty() && max_routine < min_pivotal {
        let lo = if routine.is_empty() { T::zero() } else { max_routine };
        return (lo + min_pivotal) / T::of(2.0);
    }
    let mut all: Vec<T> = pivotal.iter().chain(routine).copied().collect();
    if all.is_empty() {
        return T::zero();
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite uncertainties"));
    let rank = ((0.9 * all.len() as f64).ceil() as usize).clamp(1, all.len());
    all[rank - 1]
}

/// Explore labels `[U(s) > tau]` over every reachable chain state.
///
/// Under `Redecide` the label sits on the uncertain state itself. Under
/// `Continuation` a flag branches the *next* decision, so a key is labelled
/// when one of its successors is uncertain.
pub fn oracle_explore_labels<T: Scalar>(
    env: &EnvSpec,
    params: &PolicyParams<T>,
    history_length: usize,
    semantics: BranchSemantics,
) -> Result<Vec<OracleExploreLabel>, PolicyError> {
    let spec = env.as_chain()?;
    spec.validate()?;
    let windows = reachable_windows(spec, history_length);
    let mut uncertainty: BTreeMap<HistoryKey, T> = BTreeMap::new();
    let (mut pivotal, mut routine) = (Vec::new(), Vec::new());
    for (window, state) in &windows {
        let u = epistemic_uncertainty(env, params, window, history_length)?;
        if spec.is_pivotal(state.step) && !state.derailed {
            pivotal.push(u);
        } else {
            routine.push(u);
        }
        uncertainty.insert(window.key(), u);
    }
    let tau = uncertainty_threshold(&pivotal, &routine);
    let critical = |key: &HistoryKey| uncertainty.get(key).is_some_and(|&u| u > tau);
    let mut labels = BTreeMap::new();
    for (window, state) in &windows {
        let label = match semantics {
            BranchSemantics::Redecide => critical(&window.key()),
            BranchSemantics::Continuation => (0..spec.actions).any(|a| {
                let (_, outcome) = spec.transition(*state, ActionId(a));
                !outcome.terminal
                    && critical(&window.advance(ActionId(a), outcome.observation, history_length).key())
            }),
        };
        labels.insert(window.key(), label);
    }
    Ok(labels.into_iter().map(|(key, label)| OracleExploreLabel { key, label }).collect())
}

/// Annotated search paths: for every target, visit locations in order and
/// take on arrival. Keys where the agent stands at an empty location (the
/// next destination is uncertain) are labelled explore.
pub fn search_explore_labels(
    spec: &ObjectSearchSpec,
    history_length: usize,
) -> Result<Vec<OracleExploreLabel>, PolicyError> {
    spec.validate()?;
    let mut labels: BTreeMap<HistoryKey, bool> = BTreeMap::new();
    for target in 0..spec.locations {
        let fixed = ObjectSearchSpec { target_location: Some(target), ..spec.clone() };
        let (mut snapshot, obs) = fixed.reset(0)?;
        let mut window = HistoryWindow::start(obs);
        labels.entry(window.key()).or_insert(false);
        let mut path: Vec<ActionId> = (0..=target).map(ActionId).collect();
        path.push(fixed.take_action());
        for action in path {
            let (next, outcome) = fixed.step(&snapshot, action)?;
            if outcome.terminal {
                break;
            }
            snapshot = next;
            window = window.advance(action, outcome.observation, history_length);
            let at_empty = window.current.payload.last() == Some(&CONTENT_EMPTY)
                && window.current.payload.first() == Some(&KIND_AT);
            labels.insert(window.key(), at_empty);
        }
    }
    Ok(labels.into_iter().map(|(key, label)| OracleExploreLabel { key, label }).collect())
}

/// Per-key logistic regression of the explore logit on the labels.
pub fn fit_explore_head<T: Scalar>(
    params: &PolicyParams<T>,
    labels: &[OracleExploreLabel],
    passes: usize,
    step_size: T,
) -> Result<PolicyParams<T>, PolicyError> {
    if labels.is_empty() {
        return Err(PolicyError::EmptyLabels);
    }
    let mut out = params.clone();
    for _ in 0..passes {
        for l in labels {
            let x = out.explore_logit(&l.key);
            let y = if l.label { T::one() } else { T::zero() };
            out.set_explore_logit(l.key.clone(), x + step_size * (y - sigmoid(x)));
        }
    }
    out.clamp_logits();
    Ok(out)
}
