use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::env::KeyStateChainSpec;
use crate::rollout::{pivotal_coverage_probability, policy_with_mass};

pub const COVERAGE_Q: [f64; 9] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 1.0];
pub const COVERAGE_BRANCHING: [usize; 2] = [2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub q: f64,
    pub branching: usize,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub abs_error: f64,
    pub three_sigma: f64,
}

impl CoverageCell {
    pub fn within_bound(&self) -> bool {
        self.abs_error <= self.three_sigma
    }
}

/// Closed-form `1 - (1 - q)^B` against Monte Carlo over a single-pivot
/// chain whose policy puts mass `q` on the desirable action.
pub fn coverage_table(
    q_grid: &[f64],
    branching_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<CoverageCell>, ExperimentError> {
    let spec = KeyStateChainSpec::single_desirable(1, vec![0], 2);
    let mut cells = Vec::new();
    for &q in q_grid {
        let policy = policy_with_mass(&spec, q, 1.0, 0)?;
        for &b in branching_grid {
            let closed_form = 1.0 - (1.0 - q).powi(b as i32);
            let monte_carlo = pivotal_coverage_probability(&spec, &policy, b, trials, 0, seed)?;
            let sigma = (closed_form * (1.0 - closed_form) / trials as f64).sqrt();
            cells.push(CoverageCell {
                q,
                branching: b,
                closed_form,
                monte_carlo,
                abs_error: (monte_carlo - closed_form).abs(),
                three_sigma: 3.0 * sigma,
            });
        }
    }
    Ok(cells)
}
