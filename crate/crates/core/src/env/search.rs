use serde::{Deserialize, Serialize};

use super::{
    ActionId, EnvError, EnvSnapshot, Environment, Observation, Reader, StepOutcome, Token, Writer,
};
use crate::rng::StreamSeed;

const TAG: u8 = 2;
const LEN: usize = 2 + 4 * 5 + 8;
const NOWHERE: u32 = u32::MAX;

// Leading token of each observation kind.
pub const KIND_START: Token = 0;
pub const KIND_AT: Token = 1;
pub const KIND_TOOK_NOTHING: Token = 2;
pub const KIND_INVALID: Token = 3;
pub const KIND_SUCCESS: Token = 4;

pub const CONTENT_EMPTY: Token = 1;
pub const CONTENT_TARGET: Token = 2;

/// Search `L` locations for a hidden object and take it.
///
/// Actions `0..L` go to a location, action `L` takes the object. Only the
/// visited location's contents are observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSearchSpec {
    pub locations: usize,
    /// Fixed target, or `None` to draw it from the task seed.
    pub target_location: Option<usize>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SearchState {
    step: usize,
    location: Option<usize>,
    target: usize,
    terminal: bool,
    success: bool,
    seed: u64,
}

impl ObjectSearchSpec {
    pub fn take_action(&self) -> ActionId {
        ActionId(self.locations)
    }

    pub fn target_for(&self, task_seed: u64) -> usize {
        self.target_location.unwrap_or_else(|| {
            (StreamSeed::new(task_seed).derive("target", 0).value() % self.locations as u64) as usize
        })
    }

    fn encode(&self, s: SearchState) -> EnvSnapshot {
        Writer::new(TAG)
            .u32(s.step as u32)
            .u32(s.location.map_or(NOWHERE, |l| l as u32))
            .u32(s.target as u32)
            .u32(s.terminal as u32)
            .u32(s.success as u32)
            .u64(s.seed)
            .finish()
    }

    pub(crate) fn decode(&self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        self.decode_state(snapshot).map(|_| ())
    }

    fn decode_state(&self, snapshot: &EnvSnapshot) -> Result<SearchState, EnvError> {
        let mut r = Reader::new(snapshot, TAG, LEN)?;
        let step = r.u32() as usize;
        let location = r.u32();
        let target = r.u32() as usize;
        let terminal = r.u32();
        let success = r.u32();
        let seed = r.u64();
        let location = (location != NOWHERE).then_some(location as usize);
        if step > self.horizon
            || target >= self.locations
            || location.is_some_and(|l| l >= self.locations)
            || terminal > 1
            || success > 1
        {
            return Err(EnvError::CorruptSnapshot("search fields out of range".into()));
        }
        Ok(SearchState {
            step,
            location,
            target,
            terminal: terminal == 1,
            success: success == 1,
            seed,
        })
    }
}

impl Environment for ObjectSearchSpec {
    fn name(&self) -> &'static str {
        "object_search"
    }

    fn num_actions(&self) -> usize {
        self.locations + 1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.locations < 2 {
            return Err(EnvError::InvalidSpec("need at least 2 locations".into()));
        }
        if self.horizon < self.locations {
            return Err(EnvError::InvalidSpec(format!(
                "horizon {} cannot cover {} locations",
                self.horizon, self.locations
            )));
        }
        if self.target_location.is_some_and(|t| t >= self.locations) {
            return Err(EnvError::InvalidSpec("target location out of range".into()));
        }
        Ok(())
    }

    fn reset(&self, task_seed: u64) -> Result<(EnvSnapshot, Observation), EnvError> {
        self.validate()?;
        let state = SearchState {
            step: 0,
            location: None,
            target: self.target_for(task_seed),
            terminal: false,
            success: false,
            seed: task_seed,
        };
        let mut payload = vec![KIND_START];
        payload.extend((0..self.locations).map(|l| l as Token + 1));
        Ok((self.encode(state), Observation { payload, step_index: 0 }))
    }

    fn step(
        &self,
        snapshot: &EnvSnapshot,
        action: ActionId,
    ) -> Result<(EnvSnapshot, StepOutcome), EnvError> {
        let mut s = self.decode_state(snapshot)?;
        if s.terminal {
            return Err(EnvError::Terminal);
        }
        let invalid = action.0 > self.locations;
        let payload = if invalid {
            vec![KIND_INVALID]
        } else if action == self.take_action() {
            if s.location == Some(s.target) {
                s.success = true;
                vec![KIND_SUCCESS]
            } else {
                vec![KIND_TOOK_NOTHING, s.location.map_or(0, |l| l as Token + 1)]
            }
        } else {
            let here = action.0;
            s.location = Some(here);
            let content = if here == s.target { CONTENT_TARGET } else { CONTENT_EMPTY };
            vec![KIND_AT, here as Token + 1, content]
        };
        s.step += 1;
        s.terminal = s.success || s.step >= self.horizon;
        let outcome = StepOutcome {
            observation: Observation { payload, step_index: s.step },
            terminal: s.terminal,
            success: s.success,
            invalid_action: invalid,
        };
        Ok((self.encode(s), outcome))
    }
}
