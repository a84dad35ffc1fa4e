//! Comparison arms that share everything with the explore-triggered rollout
//! except how branching is decided.

use crate::env::EnvSpec;
use crate::forest::TrajectoryForest;
use crate::policy::PolicyParams;
use crate::rollout::{grow_forest, RolloutError, RolloutSettings, RolloutSummary, Trigger};
use crate::scalar::Scalar;

/// `N` independent chains from `o_0`. Explore flags are still sampled and
/// recorded but never branch.
pub fn run_uniform_forest<T: Scalar>(
    env: &EnvSpec,
    task_seed: u64,
    policy: &PolicyParams<T>,
    settings: &RolloutSettings,
) -> Result<TrajectoryForest<T>, RolloutError> {
    if settings.budget < 2 {
        return Err(RolloutError::Config("uniform sampling needs a budget of at least 2".into()));
    }
    let chains = RolloutSettings { roots: settings.budget, ..*settings };
    grow_forest(env, task_seed, policy, &chains, Trigger::Never)
}

/// Same roots and budget as the explore-triggered rollout, but each
/// expansion branches with probability `p_branch` regardless of the flag.
pub fn run_fixed_probability_forest<T: Scalar>(
    env: &EnvSpec,
    task_seed: u64,
    policy: &PolicyParams<T>,
    settings: &RolloutSettings,
    p_branch: f64,
) -> Result<TrajectoryForest<T>, RolloutError> {
    grow_forest(env, task_seed, policy, settings, Trigger::Fixed(p_branch))
}

/// Branch requests per expansion, pooled over logged episodes.
pub fn calibrate_fixed_probability(logs: &[RolloutSummary]) -> Result<f64, RolloutError> {
    let expansions: usize = logs.iter().map(|s| s.expansions).sum();
    if logs.is_empty() || expansions == 0 {
        return Err(RolloutError::Config("no expansions logged to calibrate against".into()));
    }
    let requests: usize = logs.iter().map(|s| s.branch_requests).sum();
    Ok(requests as f64 / expansions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::KeyStateChainSpec;
    use crate::rollout::{run_episode_forest, BranchSemantics};

    fn settings() -> RolloutSettings {
        RolloutSettings {
            budget: 8,
            roots: 4,
            branching: 2,
            history_length: 5,
            semantics: BranchSemantics::Continuation,
            seed: 1,
        }
    }

    fn summary(requests: usize, expansions: usize) -> RolloutSummary {
        RolloutSummary {
            task_seed: 0,
            group_size: 4,
            successes: 0,
            tree_steps: 0,
            chain_steps: 0,
            branch_events: requests,
            branch_requests: requests,
            expansions,
        }
    }

    #[test]
    fn uniform_always_fills_the_budget() {
        let env = EnvSpec::KeyStateChain(KeyStateChainSpec::single_desirable(5, vec![2], 4));
        let mut p = PolicyParams::<f64>::new(4, 1.0).unwrap();
        p.set_explore_logit(crate::policy::HistoryKey::from_raw("o0.0"), 30.0);
        for seed in 0..20 {
            let f = run_uniform_forest(&env, seed, &p, &settings()).unwrap();
            let c = f.step_counts();
            assert_eq!(f.leaf_count(), 8);
            assert_eq!(c.tree_steps, c.chain_steps);
            assert!(f.nodes().iter().any(|n| n.decision.explore_flag));
        }
        let tiny = RolloutSettings { budget: 1, roots: 1, ..settings() };
        assert!(run_uniform_forest(&env, 0, &p, &tiny).is_err());
    }

    #[test]
    fn uniform_discovery_matches_closed_form() {
        // q = 0.3 at the single pivot, 8 chains: 1 - 0.7^8.
        let spec = KeyStateChainSpec::single_desirable(3, vec![1], 4);
        let p = crate::rollout::policy_with_mass(&spec, 0.3, 1.0, 0).unwrap();
        let env = EnvSpec::KeyStateChain(spec);
        let s = RolloutSettings { history_length: 0, ..settings() };
        let trials = 4000;
        let hits = (0..trials)
            .filter(|&t| {
                let f = run_uniform_forest(&env, t, &p, &s).unwrap();
                f.extract_group(t).unwrap().successes() > 0
            })
            .count();
        let exact = 1.0 - 0.7f64.powi(8);
        let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((hits as f64 / trials as f64 - exact).abs() <= 3.0 * sigma);
    }

    #[test]
    fn calibration_is_a_pooled_ratio() {
        assert_eq!(calibrate_fixed_probability(&[summary(50, 1000)]).unwrap(), 0.05);
        assert_eq!(calibrate_fixed_probability(&[summary(0, 40)]).unwrap(), 0.0);
        assert_eq!(calibrate_fixed_probability(&[summary(5, 50), summary(7, 50)]).unwrap(), 0.12);
        assert!(calibrate_fixed_probability(&[]).is_err());
    }

    #[test]
    fn calibrated_fixed_arm_matches_leaf_count() {
        let spec = KeyStateChainSpec::single_desirable(6, vec![0, 3], 4);
        let env = EnvSpec::KeyStateChain(spec);
        let labels = crate::policy::oracle_explore_labels(
            &env,
            &PolicyParams::<f64>::new(4, 1.0).unwrap(),
            5,
            BranchSemantics::Continuation,
        )
        .unwrap();
        let p = crate::policy::fit_explore_head(&PolicyParams::new(4, 1.0).unwrap(), &labels, 200, 1.0).unwrap();
        let tasks = 1000u64;
        let spark: Vec<RolloutSummary> = (0..tasks)
            .map(|t| RolloutSummary::of(&run_episode_forest(&env, t, &p, &settings()).unwrap(), t))
            .collect();
        let rate = calibrate_fixed_probability(&spark).unwrap();
        let fixed_leaves: usize = (0..tasks)
            .map(|t| run_fixed_probability_forest(&env, t, &p, &settings(), rate).unwrap().leaf_count())
            .sum();
        let spark_leaves: usize = spark.iter().map(|s| s.group_size).sum();
        let rel = (fixed_leaves as f64 - spark_leaves as f64).abs() / spark_leaves as f64;
        assert!(rel <= 0.05, "spark {spark_leaves} fixed {fixed_leaves} (p={rate})");
    }
}
