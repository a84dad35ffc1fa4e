//! Exact action values on the key-state chain.
//!
//! With a unit reward for success, `Q(s, a)` is the probability that the
//! episode succeeds after taking `a` in `s` and following the policy. The
//! chain state is recoverable from the current observation, and the policy's
//! future inputs depend only on the truncated window, so values are memoized
//! by history key.

use std::collections::HashMap;

use super::{HistoryKey, HistoryWindow, PolicyError, PolicyParams};
use crate::env::chain::ChainState;
use crate::env::{ActionId, EnvSpec, Environment, KeyStateChainSpec};
use crate::scalar::Scalar;

struct ValueSolver<'a, T> {
    spec: &'a KeyStateChainSpec,
    params: &'a PolicyParams<T>,
    history_length: usize,
    memo: HashMap<HistoryKey, T>,
}

impl<T: Scalar> ValueSolver<'_, T> {
    fn state(&self, window: &HistoryWindow) -> Result<ChainState, PolicyError> {
        let (step, derailed) =
            KeyStateChainSpec::state_of(&window.current).ok_or(PolicyError::UnknownState)?;
        if step >= self.spec.horizon {
            return Err(PolicyError::UnknownState);
        }
        Ok(ChainState { step, derailed, terminal: false, seed: 0 })
    }

    fn value(&mut self, window: &HistoryWindow) -> Result<T, PolicyError> {
        let state = self.state(window)?;
        if state.derailed {
            return Ok(T::zero());
        }
        let key = window.key();
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let probs = self.params.action_distribution(&key);
        let mut v = T::zero();
        for (a, p) in probs.into_iter().enumerate() {
            v = v + p * self.q(window, state, ActionId(a))?;
        }
        self.memo.insert(key, v);
        Ok(v)
    }

    fn q(&mut self, window: &HistoryWindow, state: ChainState, action: ActionId) -> Result<T, PolicyError> {
        let (_, outcome) = self.spec.transition(state, action);
        if outcome.terminal {
            return Ok(if outcome.success { T::one() } else { T::zero() });
        }
        let next = window.advance(action, outcome.observation, self.history_length);
        self.value(&next)
    }

    fn q_all(&mut self, window: &HistoryWindow) -> Result<Vec<T>, PolicyError> {
        let state = self.state(window)?;
        (0..self.spec.actions).map(|a| self.q(window, state, ActionId(a))).collect()
    }
}

fn solver<'a, T: Scalar>(
    env: &'a EnvSpec,
    params: &'a PolicyParams<T>,
    history_length: usize,
) -> Result<ValueSolver<'a, T>, PolicyError> {
    let spec = env.as_chain()?;
    spec.validate()?;
    Ok(ValueSolver { spec, params, history_length, memo: HashMap::new() })
}

/// `Q_pi(s, a)` for every action at the state ending `window`.
pub fn q_values<T: Scalar>(
    env: &EnvSpec,
    params: &PolicyParams<T>,
    window: &HistoryWindow,
    history_length: usize,
) -> Result<Vec<T>, PolicyError> {
    solver(env, params, history_length)?.q_all(window)
}

/// `Var_{a ~ pi}[Q_pi(s, a)]`.
pub fn epistemic_uncertainty<T: Scalar>(
    env: &EnvSpec,
    params: &PolicyParams<T>,
    window: &HistoryWindow,
    history_length: usize,
) -> Result<T, PolicyError> {
    let q = q_values(env, params, window, history_length)?;
    let probs = params.action_distribution(&window.key());
    let mean: T = probs.iter().zip(&q).map(|(&p, &v)| p * v).sum();
    Ok(probs.iter().zip(&q).map(|(&p, &v)| p * (v - mean) * (v - mean)).sum())
}

/// Window reached by following the canonical on-track actions up to `step`.
pub fn canonical_window(spec: &KeyStateChainSpec, step: usize, history_length: usize) -> HistoryWindow {
    let mut window = HistoryWindow::start(KeyStateChainSpec::observation(0, false));
    for t in 0..step {
        let next = KeyStateChainSpec::observation(t + 1, false);
        window = window.advance(spec.canonical_action(t), next, history_length);
    }
    window
}

/// Policy mass on the desirable actions at a pivotal step, evaluated at the
/// canonical on-track history.
pub fn true_q<T: Scalar>(
    env: &EnvSpec,
    params: &PolicyParams<T>,
    pivotal_step: usize,
    history_length: usize,
) -> Result<T, PolicyError> {
    let spec = env.as_chain()?;
    let desirable = spec.desirable_at(pivotal_step).ok_or(PolicyError::NotPivotal(pivotal_step))?;
    let window = canonical_window(spec, pivotal_step, history_length);
    let probs = params.action_distribution(&window.key());
    Ok(desirable.iter().map(|&a| probs[a]).sum())
}

/// Success probability of the policy from the initial state.
pub fn exact_success_probability<T: Scalar>(
    env: &EnvSpec,
    params: &PolicyParams<T>,
    history_length: usize,
) -> Result<T, PolicyError> {
    let window = HistoryWindow::start(KeyStateChainSpec::observation(0, false));
    solver(env, params, history_length)?.value(&window)
}
