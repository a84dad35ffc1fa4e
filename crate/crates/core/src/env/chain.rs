use serde::{Deserialize, Serialize};

use super::{
    ActionId, EnvError, EnvSnapshot, Environment, Observation, Reader, StepOutcome, Token, Writer,
};

const TAG: u8 = 1;
const LEN: usize = 2 + 4 * 3 + 8;

/// Status token appended to every chain observation.
pub const ON_TRACK: Token = 0;
pub const DERAILED: Token = 1;

/// A horizon-`K` chain in which only the pivotal steps matter.
///
/// A non-desirable (or invalid) action at a pivotal step derails the episode:
/// it keeps running to the horizon but can no longer succeed. Observations are
/// `[step, status]`, so a derailment is visible from the next step on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStateChainSpec {
    pub horizon: usize,
    pub pivotal_steps: Vec<usize>,
    pub actions: usize,
    /// One desirable set per pivotal step, in the same order.
    pub desirable: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ChainState {
    pub step: usize,
    pub derailed: bool,
    pub terminal: bool,
    pub seed: u64,
}

impl KeyStateChainSpec {
    /// Chain with one desirable action (action 0) at each pivotal step.
    pub fn single_desirable(horizon: usize, pivotal_steps: Vec<usize>, actions: usize) -> Self {
        let desirable = vec![vec![0]; pivotal_steps.len()];
        KeyStateChainSpec { horizon, pivotal_steps, actions, desirable }
    }

    pub fn pivot_index(&self, step: usize) -> Option<usize> {
        self.pivotal_steps.iter().position(|&s| s == step)
    }

    pub fn is_pivotal(&self, step: usize) -> bool {
        self.pivot_index(step).is_some()
    }

    pub fn desirable_at(&self, step: usize) -> Option<&[usize]> {
        self.pivot_index(step).map(|i| self.desirable[i].as_slice())
    }

    pub fn is_desirable(&self, step: usize, action: ActionId) -> bool {
        match self.desirable_at(step) {
            Some(set) => set.contains(&action.0),
            None => action.0 < self.actions,
        }
    }

    /// Action taken on the canonical on-track path: the first desirable
    /// action at pivotal steps, action 0 elsewhere.
    pub fn canonical_action(&self, step: usize) -> ActionId {
        ActionId(self.desirable_at(step).map_or(0, |set| set[0]))
    }

    pub fn observation(step: usize, derailed: bool) -> Observation {
        Observation {
            payload: vec![step as Token, if derailed { DERAILED } else { ON_TRACK }],
            step_index: step,
        }
    }

    /// Hidden state implied by a chain observation.
    pub(crate) fn state_of(observation: &Observation) -> Option<(usize, bool)> {
        match observation.payload.as_slice() {
            [step, status] => Some((*step as usize, *status == DERAILED)),
            _ => None,
        }
    }

    pub(crate) fn encode(&self, state: ChainState) -> EnvSnapshot {
        Writer::new(TAG)
            .u32(state.step as u32)
            .u32(state.derailed as u32)
            .u32(state.terminal as u32)
            .u64(state.seed)
            .finish()
    }

    pub(crate) fn decode(&self, snapshot: &EnvSnapshot) -> Result<ChainState, EnvError> {
        let mut r = Reader::new(snapshot, TAG, LEN)?;
        let step = r.u32() as usize;
        let derailed = r.u32();
        let terminal = r.u32();
        let seed = r.u64();
        if step > self.horizon || derailed > 1 || terminal > 1 {
            return Err(EnvError::CorruptSnapshot("chain fields out of range".into()));
        }
        Ok(ChainState { step, derailed: derailed == 1, terminal: terminal == 1, seed })
    }

    /// Pure transition on decoded state.
    pub(crate) fn transition(&self, state: ChainState, action: ActionId) -> (ChainState, StepOutcome) {
        let invalid = action.0 >= self.actions;
        let derailed = state.derailed || invalid || !self.is_desirable(state.step, action);
        let step = state.step + 1;
        let terminal = step >= self.horizon;
        let next = ChainState { step, derailed, terminal, seed: state.seed };
        let outcome = StepOutcome {
            observation: Self::observation(step, derailed),
            terminal,
            success: terminal && !derailed,
            invalid_action: invalid,
        };
        (next, outcome)
    }
}

impl Environment for KeyStateChainSpec {
    fn name(&self) -> &'static str {
        "keystate_chain"
    }

    fn num_actions(&self) -> usize {
        self.actions
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.actions < 2 {
            return bad(format!("need at least 2 actions, got {}", self.actions));
        }
        if self.pivotal_steps.len() > self.horizon {
            return bad("more pivotal steps than horizon".into());
        }
        if self.pivotal_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("pivotal steps must be strictly increasing".into());
        }
        if let Some(&last) = self.pivotal_steps.last() {
            if last >= self.horizon {
                return bad(format!("pivotal step {last} outside horizon {}", self.horizon));
            }
        }
        if self.desirable.len() != self.pivotal_steps.len() {
            return bad("one desirable set per pivotal step required".into());
        }
        for (i, set) in self.desirable.iter().enumerate() {
            if set.is_empty() || set.len() >= self.actions {
                return bad(format!("desirable set {i} must be a strict nonempty subset"));
            }
            if set.iter().any(|&a| a >= self.actions) {
                return bad(format!("desirable set {i} names an unknown action"));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return bad(format!("desirable set {i} has duplicates"));
            }
        }
        Ok(())
    }

    fn reset(&self, task_seed: u64) -> Result<(EnvSnapshot, Observation), EnvError> {
        self.validate()?;
        let state = ChainState { step: 0, derailed: false, terminal: false, seed: task_seed };
        Ok((self.encode(state), Self::observation(0, false)))
    }

    fn step(
        &self,
        snapshot: &EnvSnapshot,
        action: ActionId,
    ) -> Result<(EnvSnapshot, StepOutcome), EnvError> {
        let state = self.decode(snapshot)?;
        if state.terminal {
            return Err(EnvError::Terminal);
        }
        let (next, outcome) = self.transition(state, action);
        Ok((self.encode(next), outcome))
    }
}
