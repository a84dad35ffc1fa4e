//! Success, efficiency and repetition metrics, pass@k, and the signed-rank
//! test.

mod pass_at_k;
mod wilcoxon;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ActionId;
use crate::forest::{StepCounts, TrajectoryForest, TrajectoryGroup};
use crate::policy::HistoryKey;
use crate::scalar::Scalar;

pub use pass_at_k::{pass_at_k, pass_at_k_exact};
pub use wilcoxon::{
    average_ranks, wilcoxon_signed_rank, Alternative, PValueMethod, WilcoxonResult, EXACT_LIMIT,
    MIN_PAIRS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("nothing to measure")]
    Empty,
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")]
    PassAtK { n: usize, c: usize, k: usize },
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("degenerate input: all paired differences are zero")]
    Degenerate,
    #[error("only {0} non-zero differences; the test needs at least 6")]
    InsufficientPairs(usize),
    #[error("chain-equivalent step count is zero")]
    ZeroChainSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    /// Tasks with at least one successful leaf.
    pub task_level: f64,
    /// Successful leaves over all leaves.
    pub leaf_level: f64,
}

pub fn success_rate(groups: &[TrajectoryGroup]) -> Result<SuccessRates, MetricsError> {
    let leaves: usize = groups.iter().map(|g| g.len()).sum();
    if groups.is_empty() || leaves == 0 {
        return Err(MetricsError::Empty);
    }
    let solved = groups.iter().filter(|g| g.successes() > 0).count();
    let good: usize = groups.iter().map(|g| g.successes()).sum();
    Ok(SuccessRates {
        task_level: solved as f64 / groups.len() as f64,
        leaf_level: good as f64 / leaves as f64,
    })
}

/// `100 * sum(tree steps) / sum(chain-equivalent steps)`.
pub fn token_efficiency(spark: &[StepCounts], chains: &[StepCounts]) -> Result<f64, MetricsError> {
    if spark.len() != chains.len() {
        return Err(MetricsError::LengthMismatch(spark.len(), chains.len()));
    }
    let tree: usize = spark.iter().map(|c| c.tree_steps).sum();
    let chain: usize = chains.iter().map(|c| c.chain_steps).sum();
    if chain == 0 {
        return Err(MetricsError::ZeroChainSteps);
    }
    Ok(100.0 * tree as f64 / chain as f64)
}

/// Share of steps whose `(key, action)` pair already occurred earlier in
/// the same trajectory, pooled over trajectories.
pub fn repetitive_action_ratio(trajectories: &[Vec<(HistoryKey, ActionId)>]) -> Result<f64, MetricsError> {
    let steps: usize = trajectories.iter().map(Vec::len).sum();
    if steps == 0 {
        return Err(MetricsError::Empty);
    }
    let mut repeats = 0usize;
    for trajectory in trajectories {
        let mut seen = HashSet::new();
        for step in trajectory {
            if !seen.insert(step) {
                repeats += 1;
            }
        }
    }
    Ok(repeats as f64 / steps as f64)
}

/// The `(key, action)` sequence of every leaf path in a group.
pub fn group_steps<T: Scalar>(
    forest: &TrajectoryForest<T>,
    group: &TrajectoryGroup,
) -> Vec<Vec<(HistoryKey, ActionId)>> {
    group
        .paths
        .iter()
        .map(|path| {
            path.iter()
                .map(|&id| {
                    let n = &forest.nodes()[id];
                    (n.history_key.clone(), n.decision.action)
                })
                .collect()
        })
        .collect()
}

/// One measured success rate on the sample-efficiency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub fraction: f64,
    pub success: f64,
}

/// Rows are arms, columns data fractions, cells the mean success of the
/// matching points (seeds averaged).
pub fn sample_efficiency_curve(points: &[CurvePoint]) -> String {
    let mut fractions: Vec<f64> = points.iter().map(|p| p.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut arms: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, u64), (f64, usize)> = BTreeMap::new();
    for p in points {
        if !arms.contains(&p.arm.as_str()) {
            arms.push(&p.arm);
        }
        let cell = cells.entry((&p.arm, p.fraction.to_bits())).or_insert((0.0, 0));
        cell.0 += p.success;
        cell.1 += 1;
    }
    let mut out = String::from("arm");
    for f in &fractions {
        let _ = write!(out, ",{f}");
    }
    out.push('\n');
    for arm in arms {
        out.push_str(arm);
        for f in &fractions {
            match cells.get(&(arm, f.to_bits())) {
                Some(&(sum, n)) => {
                    let _ = write!(out, ",{:.4}", sum / n as f64);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
