//! POMDP environment contract and the two reference environments.
//!
//! Environments are pure functions of `(spec, snapshot, action)`: the hidden
//! state lives entirely inside an [`EnvSnapshot`], so any number of branches
//! can be stepped from the same snapshot.

pub(crate) mod chain;
mod search;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chain::{KeyStateChainSpec, DERAILED, ON_TRACK};
pub use search::{
    ObjectSearchSpec, CONTENT_EMPTY, CONTENT_TARGET, KIND_AT, KIND_INVALID, KIND_START, KIND_SUCCESS,
    KIND_TOOK_NOTHING,
};

/// Observation token.
pub type Token = u16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("step requested from a terminal state")]
    Terminal,
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("operation not supported by the {0} environment")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub payload: Vec<Token>,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

/// Serialized hidden state. Opaque outside this module.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvSnapshot(Vec<u8>);

impl EnvSnapshot {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    /// Wrap raw bytes. Validation happens on the next `step`.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        EnvSnapshot(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub terminal: bool,
    pub success: bool,
    pub invalid_action: bool,
}

pub trait Environment {
    fn name(&self) -> &'static str;
    fn num_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    fn validate(&self) -> Result<(), EnvError>;
    fn reset(&self, task_seed: u64) -> Result<(EnvSnapshot, Observation), EnvError>;
    fn step(
        &self,
        snapshot: &EnvSnapshot,
        action: ActionId,
    ) -> Result<(EnvSnapshot, StepOutcome), EnvError>;
}

/// Either reference environment, as named in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    KeyStateChain(KeyStateChainSpec),
    ObjectSearch(ObjectSearchSpec),
}

impl EnvSpec {
    pub fn as_chain(&self) -> Result<&KeyStateChainSpec, EnvError> {
        match self {
            EnvSpec::KeyStateChain(spec) => Ok(spec),
            EnvSpec::ObjectSearch(_) => Err(EnvError::Unsupported("object_search")),
        }
    }
}

impl Environment for EnvSpec {
    fn name(&self) -> &'static str {
        match self {
            EnvSpec::KeyStateChain(s) => s.name(),
            EnvSpec::ObjectSearch(s) => s.name(),
        }
    }

    fn num_actions(&self) -> usize {
        match self {
            EnvSpec::KeyStateChain(s) => s.num_actions(),
            EnvSpec::ObjectSearch(s) => s.num_actions(),
        }
    }

    fn horizon(&self) -> usize {
        match self {
            EnvSpec::KeyStateChain(s) => s.horizon(),
            EnvSpec::ObjectSearch(s) => s.horizon(),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvSpec::KeyStateChain(s) => s.validate(),
            EnvSpec::ObjectSearch(s) => s.validate(),
        }
    }

    fn reset(&self, task_seed: u64) -> Result<(EnvSnapshot, Observation), EnvError> {
        match self {
            EnvSpec::KeyStateChain(s) => s.reset(task_seed),
            EnvSpec::ObjectSearch(s) => s.reset(task_seed),
        }
    }

    fn step(
        &self,
        snapshot: &EnvSnapshot,
        action: ActionId,
    ) -> Result<(EnvSnapshot, StepOutcome), EnvError> {
        match self {
            EnvSpec::KeyStateChain(s) => s.step(snapshot, action),
            EnvSpec::ObjectSearch(s) => s.step(snapshot, action),
        }
    }
}

/// Replays an action log from `reset`. Used as the oracle for snapshot
/// soundness; rollouts restore snapshots instead.
pub fn replay<E: Environment + ?Sized>(
    env: &E,
    task_seed: u64,
    actions: &[ActionId],
) -> Result<Vec<StepOutcome>, EnvError> {
    let (mut snapshot, _) = env.reset(task_seed)?;
    let mut outcomes = Vec::with_capacity(actions.len());
    for &action in actions {
        let (next, outcome) = env.step(&snapshot, action)?;
        let terminal = outcome.terminal;
        outcomes.push(outcome);
        snapshot = next;
        if terminal {
            break;
        }
    }
    Ok(outcomes)
}

/// Serialize-then-restore. Corrupt input surfaces as `CorruptSnapshot`.
pub fn snapshot_roundtrip(spec: &EnvSpec, snapshot: &EnvSnapshot) -> Result<EnvSnapshot, EnvError> {
    let bytes = snapshot.as_bytes().to_vec();
    let restored = EnvSnapshot::from_bytes(bytes);
    match spec {
        EnvSpec::KeyStateChain(s) => s.decode(&restored).map(|_| restored),
        EnvSpec::ObjectSearch(s) => s.decode(&restored).map(|_| restored),
    }
}

// Little-endian field codec shared by both environments.
struct Writer(Vec<u8>);

impl Writer {
    fn new(tag: u8) -> Self {
        Writer(vec![tag, SNAPSHOT_VERSION])
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn finish(self) -> EnvSnapshot {
        EnvSnapshot(self.0)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

const SNAPSHOT_VERSION: u8 = 1;

impl<'a> Reader<'a> {
    fn new(snapshot: &'a EnvSnapshot, tag: u8, len: usize) -> Result<Self, EnvError> {
        let bytes = snapshot.as_bytes();
        if bytes.len() != len {
            return Err(EnvError::CorruptSnapshot(format!(
                "expected {len} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes[0] != tag {
            return Err(EnvError::CorruptSnapshot(format!("unexpected tag {}", bytes[0])));
        }
        if bytes[1] != SNAPSHOT_VERSION {
            return Err(EnvError::CorruptSnapshot(format!("unsupported version {}", bytes[1])));
        }
        Ok(Reader { bytes, pos: 2 })
    }
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }
    fn u64(&mut self) -> u64 {
        let v = u64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        v
    }
}
