use std::collections::BTreeMap;

use crate::policy::HistoryKey;
use crate::scalar::Scalar;

/// Sparse gradient over the tabular parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyGradient<T> {
    pub action: BTreeMap<HistoryKey, Vec<T>>,
    pub explore: BTreeMap<HistoryKey, T>,
}

impl<T: Scalar> PolicyGradient<T> {
    pub(crate) fn action_entry(&mut self, key: &HistoryKey, num_actions: usize) -> &mut Vec<T> {
        self.action.entry(key.clone()).or_insert_with(|| vec![T::zero(); num_actions])
    }

    pub(crate) fn explore_entry(&mut self, key: &HistoryKey) -> &mut T {
        self.explore.entry(key.clone()).or_insert_with(T::zero)
    }

    pub fn is_finite(&self) -> bool {
        self.action.values().flatten().all(|v| v.is_finite())
            && self.explore.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        self.action
            .values()
            .flatten()
            .chain(self.explore.values())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.action.values().flatten().chain(self.explore.values()).all(|&v| v == T::zero())
    }
}
