//! Tabular softmax policy with a Bernoulli explore head.
//!
//! Each history key owns a logit vector over actions and one explore logit.
//! Unseen keys read as zeros: uniform actions, explore probability 1/2.

mod cold_start;
mod history;
mod uncertainty;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionId, EnvError};
use crate::scalar::{log_sigmoid, log_sum_exp, sigmoid, Scalar};

pub use cold_start::{
    fit_explore_head, oracle_explore_labels, search_explore_labels, uncertainty_threshold,
    OracleExploreLabel,
};
pub use history::{HistoryKey, HistoryWindow};
pub use uncertainty::{
    canonical_window, epistemic_uncertainty, exact_success_probability, q_values, true_q,
};

/// Logits are kept inside `[-LOGIT_CAP, LOGIT_CAP]`.
pub const LOGIT_CAP: f64 = 30.0;

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("temperature must be positive and finite")]
    Temperature,
    #[error("policy needs at least 2 actions, got {0}")]
    ActionCount(usize),
    #[error("logit vector for key {key} has length {found}, expected {expected}")]
    LogitLength { key: HistoryKey, found: usize, expected: usize },
    #[error("non-finite logit for key {0}")]
    NonFinite(HistoryKey),
    #[error("no labels to fit")]
    EmptyLabels,
    #[error("pivotal step {0} is not a pivotal step of this chain")]
    NotPivotal(usize),
    #[error("history does not describe a reachable chain state")]
    UnknownState,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy document: {0}")]
    Format(String),
}

/// One sampled `(explore flag, action)` pair with its log-probabilities
/// under the policy that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecision<T> {
    pub explore_flag: bool,
    pub action: ActionId,
    pub logprob_action: T,
    pub logprob_flag: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolicyParams<T> {
    pub num_actions: usize,
    pub temperature: T,
    pub action_logits: BTreeMap<HistoryKey, Vec<T>>,
    pub explore_logits: BTreeMap<HistoryKey, T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct PolicyDocument<T> {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<BTreeMap<String, String>>,
    #[serde(flatten)]
    params: PolicyParams<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn new(num_actions: usize, temperature: T) -> Result<Self, PolicyError> {
        if num_actions < 2 {
            return Err(PolicyError::ActionCount(num_actions));
        }
        if !(temperature > T::zero() && temperature.is_finite()) {
            return Err(PolicyError::Temperature);
        }
        Ok(PolicyParams {
            num_actions,
            temperature,
            action_logits: BTreeMap::new(),
            explore_logits: BTreeMap::new(),
        })
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.num_actions < 2 {
            return Err(PolicyError::ActionCount(self.num_actions));
        }
        if !(self.temperature > T::zero() && self.temperature.is_finite()) {
            return Err(PolicyError::Temperature);
        }
        for (key, logits) in &self.action_logits {
            if logits.len() != self.num_actions {
                return Err(PolicyError::LogitLength {
                    key: key.clone(),
                    found: logits.len(),
                    expected: self.num_actions,
                });
            }
            if logits.iter().any(|l| !l.is_finite()) {
                return Err(PolicyError::NonFinite(key.clone()));
            }
        }
        match self.explore_logits.iter().find(|(_, x)| !x.is_finite()) {
            Some((key, _)) => Err(PolicyError::NonFinite(key.clone())),
            None => Ok(()),
        }
    }

    /// Action logits for `key`; zeros when the key has not been seen.
    pub fn logits(&self, key: &HistoryKey) -> Vec<T> {
        self.action_logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![T::zero(); self.num_actions])
    }

    pub fn explore_logit(&self, key: &HistoryKey) -> T {
        self.explore_logits.get(key).copied().unwrap_or_else(T::zero)
    }

    pub fn set_logits(&mut self, key: HistoryKey, logits: Vec<T>) {
        assert_eq!(logits.len(), self.num_actions, "logit vector length");
        self.action_logits.insert(key, logits);
    }

    pub fn set_explore_logit(&mut self, key: HistoryKey, logit: T) {
        self.explore_logits.insert(key, logit);
    }

    /// `log softmax(logits / temperature)`.
    pub fn action_log_probs(&self, key: &HistoryKey) -> Vec<T> {
        let scaled: Vec<T> = self.logits(key).into_iter().map(|l| l / self.temperature).collect();
        // Shift first: `s - (max + ln sum)` loses `ln sum` once `max` is huge.
        let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
        let shifted: Vec<T> = scaled.into_iter().map(|s| s - max).collect();
        let norm = log_sum_exp(&shifted);
        shifted.into_iter().map(|s| s - norm).collect()
    }

    pub fn action_distribution(&self, key: &HistoryKey) -> Vec<T> {
        self.action_log_probs(key).into_iter().map(T::exp).collect()
    }

    pub fn explore_probability(&self, key: &HistoryKey) -> T {
        sigmoid(self.explore_logit(key))
    }

    pub fn flag_log_prob(&self, key: &HistoryKey, flag: bool) -> T {
        let x = self.explore_logit(key);
        if flag {
            log_sigmoid(x)
        } else {
            log_sigmoid(-x)
        }
    }

    /// Sample the explore flag, then the action.
    pub fn decide<R: Rng + ?Sized>(&self, key: &HistoryKey, rng: &mut R) -> StepDecision<T> {
        let p_flag = self.explore_probability(key).as_f64();
        let explore_flag = rng.random::<f64>() < p_flag;
        let log_probs = self.action_log_probs(key);
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut action = log_probs.len() - 1;
        for (a, lp) in log_probs.iter().enumerate() {
            acc += lp.exp().as_f64();
            if u < acc {
                action = a;
                break;
            }
        }
        StepDecision {
            explore_flag,
            action: ActionId(action),
            logprob_action: log_probs[action],
            logprob_flag: self.flag_log_prob(key, explore_flag),
        }
    }

    /// Argmax action (lowest index on ties) with the explore flag off.
    pub fn greedy(&self, key: &HistoryKey) -> StepDecision<T> {
        let log_probs = self.action_log_probs(key);
        let mut best = 0;
        for (a, lp) in log_probs.iter().enumerate() {
            if *lp > log_probs[best] {
                best = a;
            }
        }
        StepDecision {
            explore_flag: false,
            action: ActionId(best),
            logprob_action: log_probs[best],
            logprob_flag: self.flag_log_prob(key, false),
        }
    }

    pub fn with_temperature(&self, temperature: T) -> Result<Self, PolicyError> {
        let mut out = self.clone();
        out.temperature = temperature;
        out.validate()?;
        Ok(out)
    }

    /// Clamp every logit into `[-LOGIT_CAP, LOGIT_CAP]`.
    pub fn clamp_logits(&mut self) {
        let cap = T::of(LOGIT_CAP);
        for logits in self.action_logits.values_mut() {
            for l in logits.iter_mut() {
                *l = l.max(-cap).min(cap);
            }
        }
        for x in self.explore_logits.values_mut() {
            *x = x.max(-cap).min(cap);
        }
    }

    /// Versioned JSON document; `provenance` carries the resolved run config.
    pub fn to_json(&self, provenance: Option<&BTreeMap<String, String>>) -> String {
        let doc = PolicyDocument {
            format_version: POLICY_FORMAT_VERSION,
            provenance: provenance.cloned(),
            params: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let doc: PolicyDocument<T> =
            serde_json::from_str(text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if doc.format_version != POLICY_FORMAT_VERSION {
            return Err(PolicyError::Format(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        doc.params.validate()?;
        Ok(doc.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeed;
    use proptest::prelude::*;

    fn key(s: &str) -> HistoryKey {
        HistoryKey::from_raw(s)
    }

    #[test]
    fn zero_logits_give_uniform_actions_and_even_flag() {
        let p = PolicyParams::<f64>::new(4, 1.0).unwrap();
        for q in p.action_distribution(&key("x")) {
            assert!((q - 0.25).abs() < 1e-15);
        }
        assert!((p.explore_probability(&key("x")) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn temperature_scales_logit_gap() {
        let mut p = PolicyParams::<f64>::new(2, 0.4).unwrap();
        p.set_logits(key("k"), vec![2.0, 0.0]);
        let expected = 1.0 / (1.0 + (-5.0f64).exp());
        assert!((p.action_distribution(&key("k"))[0] - expected).abs() < 1e-12);
        assert!((expected - 0.99331).abs() < 1e-5);
    }

    #[test]
    fn softmax_reference_values() {
        let mut p = PolicyParams::<f64>::new(4, 1.0).unwrap();
        p.set_logits(key("k"), vec![1.0, 0.0, 0.0, 0.0]);
        let d = p.action_distribution(&key("k"));
        let e = std::f64::consts::E;
        assert!((d[0] - e / (e + 3.0)).abs() < 1e-12);
        for (got, want) in d.iter().zip([0.4754, 0.1749, 0.1749, 0.1749]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn tiny_temperature_still_normalizes() {
        let mut p = PolicyParams::new(4, 1e-300).unwrap();
        p.set_logits(key("k"), vec![30.0, 30.0, -30.0, -30.0]);
        let dist = p.action_distribution(&key("k"));
        assert_eq!(dist, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn capped_logit_saturates() {
        let mut p = PolicyParams::<f64>::new(4, 1.0).unwrap();
        p.set_logits(key("k"), vec![1e9, 0.0, 0.0, 0.0]);
        p.clamp_logits();
        assert_eq!(p.logits(&key("k"))[0], LOGIT_CAP);
        assert!(p.action_distribution(&key("k"))[0] >= 1.0 - 1e-12);
    }

    #[test]
    fn decide_frequencies_follow_distribution() {
        let mut p = PolicyParams::<f64>::new(3, 1.0).unwrap();
        p.set_logits(key("k"), vec![1.0, 0.0, -1.0]);
        p.set_explore_logit(key("k"), 1.0);
        let probs = p.action_distribution(&key("k"));
        let mut rng = StreamSeed::new(3).rng();
        let n = 60_000;
        let mut counts = [0usize; 3];
        let mut flags = 0usize;
        for _ in 0..n {
            let d = p.decide(&key("k"), &mut rng);
            counts[d.action.0] += 1;
            flags += d.explore_flag as usize;
        }
        for a in 0..3 {
            let f = counts[a] as f64 / n as f64;
            let sd = (probs[a] * (1.0 - probs[a]) / n as f64).sqrt();
            assert!((f - probs[a]).abs() < 4.0 * sd);
        }
        let pf = sigmoid(1.0f64);
        let sd = (pf * (1.0 - pf) / n as f64).sqrt();
        assert!((flags as f64 / n as f64 - pf).abs() < 4.0 * sd);
    }

    #[test]
    fn decide_is_deterministic_in_the_stream() {
        let p = PolicyParams::<f64>::new(5, 0.4).unwrap();
        let a = p.decide(&key("k"), &mut StreamSeed::new(1).rng());
        let b = p.decide(&key("k"), &mut StreamSeed::new(1).rng());
        assert_eq!(a, b);
    }

    #[test]
    fn works_in_single_precision() {
        let mut p = PolicyParams::<f32>::new(4, 0.4).unwrap();
        p.set_logits(key("k"), vec![30.0, -30.0, 0.0, 0.0]);
        let d = p.action_distribution(&key("k"));
        assert!(d.iter().all(|x| x.is_finite()));
        assert!((d.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn json_document_roundtrips_and_rejects_bad_versions() {
        let mut p = PolicyParams::<f64>::new(3, 0.4).unwrap();
        p.set_logits(key("a"), vec![0.5, -0.25, 1.0]);
        p.set_explore_logit(key("a"), -2.0);
        let text = p.to_json(None);
        assert_eq!(PolicyParams::<f64>::from_json(&text).unwrap(), p);
        let bad = text.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(PolicyParams::<f64>::from_json(&bad).is_err());
        assert!(PolicyParams::<f64>::new(1, 1.0).is_err());
        assert!(PolicyParams::<f64>::new(2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn distribution_normalized_and_logprobs_consistent(
            logits in prop::collection::vec(-30.0f64..30.0, 2..8),
            temperature in 0.05f64..5.0,
            flag_logit in -30.0f64..30.0,
            seed in any::<u64>(),
        ) {
            let mut p = PolicyParams::new(logits.len(), temperature).unwrap();
            p.set_logits(key("k"), logits);
            p.set_explore_logit(key("k"), flag_logit);
            let d = p.action_distribution(&key("k"));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let dec = p.decide(&key("k"), &mut StreamSeed::new(seed).rng());
            prop_assert!((dec.logprob_action.exp() - d[dec.action.0]).abs() <= 1e-10);
            let pf = p.explore_probability(&key("k"));
            let want = if dec.explore_flag { pf } else { 1.0 - pf };
            prop_assert!((dec.logprob_flag.exp() - want).abs() <= 1e-10);
        }

        #[test]
        fn cooling_never_lowers_argmax_mass(
            logits in prop::collection::vec(-10.0f64..10.0, 2..6),
            hot in 0.1f64..4.0,
            ratio in 0.05f64..1.0,
        ) {
            let mut p = PolicyParams::new(logits.len(), hot).unwrap();
            p.set_logits(key("k"), logits.clone());
            let argmax = (0..logits.len())
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
                .unwrap();
            let warm = p.action_distribution(&key("k"))[argmax];
            let cold = p.with_temperature(hot * ratio).unwrap().action_distribution(&key("k"))[argmax];
            prop_assert!(cold >= warm - 1e-12);
        }
    }
}
