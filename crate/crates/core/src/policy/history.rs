use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Observation};

/// Lookup key for the tabular policy: the current observation plus the last
/// `h` (observation, action) pairs. Step indices are not part of the key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HistoryKey(String);

impl HistoryKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_raw(raw: impl Into<String>) -> Self {
        HistoryKey(raw.into())
    }
}

impl std::fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Truncated interaction history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub past: Vec<(Observation, ActionId)>,
    pub current: Observation,
}

fn write_obs(out: &mut String, obs: &Observation) {
    out.push('o');
    for (i, tok) in obs.payload.iter().enumerate() {
        if i > 0 {
            out.push('.');
        }
        let _ = write!(out, "{tok}");
    }
}

impl HistoryWindow {
    pub fn start(observation: Observation) -> Self {
        HistoryWindow { past: Vec::new(), current: observation }
    }

    /// Window after taking `action` and observing `next`, keeping `h` pairs.
    pub fn advance(&self, action: ActionId, next: Observation, h: usize) -> Self {
        let mut past = Vec::with_capacity(h);
        if h > 0 {
            let keep = (h - 1).min(self.past.len());
            past.extend_from_slice(&self.past[self.past.len() - keep..]);
            past.push((self.current.clone(), action));
        }
        HistoryWindow { past, current: next }
    }

    pub fn key(&self) -> HistoryKey {
        let mut s = String::new();
        for (obs, action) in &self.past {
            write_obs(&mut s, obs);
            let _ = write!(s, ">a{}|", action.0);
        }
        write_obs(&mut s, &self.current);
        HistoryKey(s)
    }
}
