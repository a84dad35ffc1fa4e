//! Forest growth: roots, explore-triggered branching, budget clamping.
//!
//! Growth is depth-synchronous. Every loop iteration expands all active
//! leaves in ascending node id, so when the budget cannot satisfy every
//! branch request the older leaves win.
//!
//! Randomness is keyed by position, not by schedule: root `i` draws from
//! `task/root/i`, child `j` of node `n` from `task/node/n/child/j`. The same
//! forest comes out whichever thread grows it.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, EnvSpec, Environment, KeyStateChainSpec};
use crate::forest::{BudgetLedger, ForestError, NodeDraft, NodeId, TrajectoryForest};
use crate::policy::{HistoryWindow, PolicyError, PolicyParams, StepDecision};
use crate::rng::StreamSeed;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Where a branch's children come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSemantics {
    /// A flag on the step-`t` decision spawns `b` fresh step-`t+1`
    /// continuations from the post-step history.
    #[default]
    Continuation,
    /// The flagged step-`t+1` decision is discarded and `b` fresh samples of
    /// that same step are taken instead. Root decisions never branch.
    Redecide,
}

impl std::str::FromStr for BranchSemantics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "continuation" => Ok(BranchSemantics::Continuation),
            "redecide" => Ok(BranchSemantics::Redecide),
            other => Err(format!("unknown branch semantics `{other}`")),
        }
    }
}

impl std::fmt::Display for BranchSemantics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BranchSemantics::Continuation => "continuation",
            BranchSemantics::Redecide => "redecide",
        })
    }
}

/// What decides the requested branching factor at an expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// The policy's own explore flag.
    ExploreFlag,
    /// Independent coin with this probability, ignoring the flag.
    Fixed(f64),
    /// Never branch.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub budget: usize,
    pub roots: usize,
    pub branching: usize,
    pub history_length: usize,
    pub semantics: BranchSemantics,
    /// Root of every stream used by the rollout.
    pub seed: u64,
}

impl RolloutSettings {
    pub fn ledger(&self) -> Result<BudgetLedger, RolloutError> {
        BudgetLedger::new(self.budget, self.roots, self.branching)
            .map_err(|e| RolloutError::Config(e.to_string()))
    }

    fn task_stream(&self, task_seed: u64) -> StreamSeed {
        StreamSeed::new(self.seed).derive("task", task_seed)
    }
}

/// `B` when the decision carries the explore flag, else 1.
pub fn branching_criterion<T>(decision: &StepDecision<T>, branching: usize) -> usize {
    if decision.explore_flag {
        branching
    } else {
        1
    }
}

struct Grower<'a, T> {
    env: &'a EnvSpec,
    policy: &'a PolicyParams<T>,
    settings: RolloutSettings,
    stream: StreamSeed,
    forest: TrajectoryForest<T>,
    // History h_{t+1} after each active leaf's own step.
    windows: BTreeMap<NodeId, HistoryWindow>,
}

impl<T: Scalar> Grower<'_, T> {
    fn draft(
        &self,
        window: &HistoryWindow,
        snapshot: &crate::env::EnvSnapshot,
        decision: StepDecision<T>,
    ) -> Result<(NodeDraft<T>, HistoryWindow), RolloutError> {
        let (next, outcome) = self.env.step(snapshot, decision.action)?;
        let after = window.advance(
            decision.action,
            outcome.observation.clone(),
            self.settings.history_length,
        );
        let draft = NodeDraft {
            history_key: window.key(),
            observation: window.current.clone(),
            decision,
            outcome,
            snapshot: next,
        };
        Ok((draft, after))
    }

    fn commit(&mut self, parent: NodeId, drafts: Vec<(NodeDraft<T>, HistoryWindow)>) -> Result<(), RolloutError> {
        let (drafts, windows): (Vec<_>, Vec<_>) = drafts.into_iter().unzip();
        let ids = self.forest.add_children(parent, drafts)?;
        self.windows.remove(&parent);
        for (id, window) in ids.into_iter().zip(windows) {
            if self.forest.is_active(id) {
                self.windows.insert(id, window);
            }
        }
        Ok(())
    }

    fn initialize(&mut self, task_seed: u64) -> Result<(), RolloutError> {
        let (snapshot, obs) = self.env.reset(task_seed)?;
        let window = HistoryWindow::start(obs);
        let key = window.key();
        for i in 0..self.settings.roots {
            let mut rng = self.stream.derive("root", i as u64).rng();
            let decision = self.policy.decide(&key, &mut rng);
            let (draft, after) = self.draft(&window, &snapshot, decision)?;
            let id = self.forest.add_root(draft)?;
            if self.forest.is_active(id) {
                self.windows.insert(id, after);
            }
        }
        Ok(())
    }

    fn requested(&self, trigger: Trigger, node: NodeId, flagged: bool) -> usize {
        match trigger {
            Trigger::ExploreFlag if flagged => self.settings.branching,
            Trigger::Fixed(p) => {
                let mut rng = self.stream.derive("trigger", node as u64).rng();
                if rng.random::<f64>() < p {
                    self.settings.branching
                } else {
                    1
                }
            }
            _ => 1,
        }
    }

    fn expand(&mut self, node: NodeId, trigger: Trigger) -> Result<(), RolloutError> {
        let window = self.windows.get(&node).cloned().expect("active leaf has a window");
        let snapshot = self.forest.snapshot(node).cloned().expect("active leaf has a snapshot");
        let key = window.key();
        let node_stream = self.stream.derive("node", node as u64);
        let policy = self.policy;
        let fresh = |j: usize| policy.decide(&key, &mut node_stream.derive("child", j as u64).rng());

        let (probe, flagged) = match self.settings.semantics {
            BranchSemantics::Continuation => {
                (None, self.forest.node(node)?.decision.explore_flag)
            }
            BranchSemantics::Redecide => {
                let probe = self.policy.decide(&key, &mut self.stream.derive("probe", node as u64).rng());
                (Some(probe), probe.explore_flag)
            }
        };
        let requested = self.requested(trigger, node, flagged);
        let granted = self.forest.grant(node, requested)?;

        let decisions: Vec<StepDecision<T>> = match probe {
            Some(probe) if granted == 1 => vec![probe],
            Some(probe) => {
                self.forest.record_trigger(node, probe)?;
                (0..granted).map(fresh).collect()
            }
            None => (0..granted).map(fresh).collect(),
        };
        let drafts = decisions
            .into_iter()
            .map(|d| self.draft(&window, &snapshot, d))
            .collect::<Result<Vec<_>, _>>()?;
        self.commit(node, drafts)
    }
}

/// Grows one task's forest until every leaf is terminal or at the horizon.
pub fn grow_forest<T: Scalar>(
    env: &EnvSpec,
    task_seed: u64,
    policy: &PolicyParams<T>,
    settings: &RolloutSettings,
    trigger: Trigger,
) -> Result<TrajectoryForest<T>, RolloutError> {
    env.validate()?;
    if policy.num_actions != env.num_actions() {
        return Err(RolloutError::Config(format!(
            "policy has {} actions, environment has {}",
            policy.num_actions,
            env.num_actions()
        )));
    }
    if let Trigger::Fixed(p) = trigger {
        if !(0.0..=1.0).contains(&p) {
            return Err(RolloutError::Config(format!("branch probability {p} outside [0, 1]")));
        }
    }
    let mut grower = Grower {
        env,
        policy,
        settings: *settings,
        stream: settings.task_stream(task_seed),
        forest: TrajectoryForest::new(settings.ledger()?, env.horizon()),
        windows: BTreeMap::new(),
    };
    grower.initialize(task_seed)?;
    loop {
        let active = grower.forest.active_leaves();
        if active.is_empty() {
            break;
        }
        for node in active {
            grower.expand(node, trigger)?;
        }
    }
    Ok(grower.forest)
}

/// The explore-triggered rollout.
pub fn run_episode_forest<T: Scalar>(
    env: &EnvSpec,
    task_seed: u64,
    policy: &PolicyParams<T>,
    settings: &RolloutSettings,
) -> Result<TrajectoryForest<T>, RolloutError> {
    grow_forest(env, task_seed, policy, settings, Trigger::ExploreFlag)
}

/// Only the `M` roots, each grown as a chain. Mostly useful for tests and
/// for checking root-stage behaviour in isolation.
pub fn initialize_roots<T: Scalar>(
    env: &EnvSpec,
    task_seed: u64,
    policy: &PolicyParams<T>,
    settings: &RolloutSettings,
) -> Result<TrajectoryForest<T>, RolloutError> {
    let mut grower = Grower {
        env,
        policy,
        settings: *settings,
        stream: settings.task_stream(task_seed),
        forest: TrajectoryForest::new(settings.ledger()?, env.horizon()),
        windows: BTreeMap::new(),
    };
    grower.initialize(task_seed)?;
    Ok(grower.forest)
}

/// One row of the rollout log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub task_seed: u64,
    pub group_size: usize,
    pub successes: usize,
    pub tree_steps: usize,
    pub chain_steps: usize,
    pub branch_events: usize,
    pub branch_requests: usize,
    pub expansions: usize,
}

impl RolloutSummary {
    pub fn of<T: Scalar>(forest: &TrajectoryForest<T>, task_seed: u64) -> Self {
        let counts = forest.step_counts();
        let leaves = forest.leaves();
        RolloutSummary {
            task_seed,
            group_size: leaves.len(),
            successes: leaves.iter().filter(|&&l| forest.nodes()[l].outcome.success).count(),
            tree_steps: counts.tree_steps,
            chain_steps: counts.chain_steps,
            branch_events: forest.branch_events(),
            branch_requests: forest.branch_requests(),
            expansions: forest.expansions(),
        }
    }
}

/// Monte Carlo frequency with which at least one of `B` independent
/// continuations at the single pivotal step of `spec` picks a desirable
/// action, each continuation restored from the same pre-pivot snapshot.
pub fn pivotal_coverage_probability<T: Scalar>(
    spec: &KeyStateChainSpec,
    policy: &PolicyParams<T>,
    branching: usize,
    trials: usize,
    history_length: usize,
    seed: u64,
) -> Result<f64, RolloutError> {
    if trials == 0 {
        return Err(RolloutError::Config("need at least one trial".into()));
    }
    if spec.pivotal_steps.len() != 1 {
        return Err(RolloutError::Config("coverage needs exactly one pivotal step".into()));
    }
    let env = EnvSpec::KeyStateChain(spec.clone());
    let pivot = spec.pivotal_steps[0];
    // Walk the canonical path to the pivotal state.
    let (mut snapshot, obs) = env.reset(seed)?;
    let mut window = HistoryWindow::start(obs);
    for t in 0..pivot {
        let action = spec.canonical_action(t);
        let (next, outcome) = env.step(&snapshot, action)?;
        window = window.advance(action, outcome.observation, history_length);
        snapshot = next;
    }
    let key = window.key();
    let stream = StreamSeed::new(seed).derive("coverage", 0);
    let mut hits = 0usize;
    for trial in 0..trials {
        let mut rng = stream.derive("trial", trial as u64).rng();
        let mut covered = false;
        for _ in 0..branching {
            let d = policy.decide(&key, &mut rng);
            let (_, outcome) = env.step(&snapshot, d.action)?;
            covered |= KeyStateChainSpec::observation(pivot + 1, false) == outcome.observation;
        }
        hits += covered as usize;
    }
    Ok(hits as f64 / trials as f64)
}

/// Single-action policy at the pivotal key with desirable mass `q` and
/// explore logit 0, for coverage experiments.
pub fn policy_with_mass(
    spec: &KeyStateChainSpec,
    q: f64,
    temperature: f64,
    history_length: usize,
) -> Result<PolicyParams<f64>, RolloutError> {
    let mut params = PolicyParams::new(spec.actions, temperature)?;
    let pivot = *spec
        .pivotal_steps
        .first()
        .ok_or_else(|| RolloutError::Config("no pivotal step".into()))?;
    let desirable = spec.desirable_at(pivot).expect("pivot has a desirable set");
    let k = desirable.len() as f64;
    let a = spec.actions as f64;
    // Equal logits inside each class; gap chosen so the class masses are q, 1-q.
    let gap = if q <= 0.0 {
        -crate::policy::LOGIT_CAP
    } else if q >= 1.0 || k == a {
        crate::policy::LOGIT_CAP
    } else {
        (temperature * ((q * (a - k)) / ((1.0 - q) * k)).ln()).clamp(-crate::policy::LOGIT_CAP, crate::policy::LOGIT_CAP)
    };
    let logits = (0..spec.actions)
        .map(|i| if desirable.contains(&i) { gap } else { 0.0 })
        .collect();
    let window = crate::policy::canonical_window(spec, pivot, history_length);
    params.set_logits(window.key(), logits);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionId, ObjectSearchSpec};

    fn chain(k: usize, pivots: Vec<usize>, a: usize) -> EnvSpec {
        EnvSpec::KeyStateChain(KeyStateChainSpec::single_desirable(k, pivots, a))
    }

    fn settings(n: usize, m: usize, b: usize) -> RolloutSettings {
        RolloutSettings {
            budget: n,
            roots: m,
            branching: b,
            history_length: 5,
            semantics: BranchSemantics::Continuation,
            seed: 11,
        }
    }

    fn explore_everywhere(a: usize, logit: f64) -> PolicyParams<f64> {
        let mut p = PolicyParams::new(a, 1.0).unwrap();
        // Keys for history_length 0.
        for step in 0..12 {
            for derailed in [false, true] {
                let obs = KeyStateChainSpec::observation(step, derailed);
                p.set_explore_logit(HistoryWindow::start(obs).key(), logit);
            }
        }
        p
    }

    #[test]
    fn criterion_maps_flag_to_factor() {
        let mut d = StepDecision { explore_flag: true, action: ActionId(0), logprob_action: 0.0, logprob_flag: 0.0 };
        assert_eq!(branching_criterion(&d, 2), 2);
        assert_eq!(branching_criterion(&d, 3), 3);
        d.explore_flag = false;
        assert_eq!(branching_criterion(&d, 2), 1);
    }

    #[test]
    fn roots_share_the_initial_observation() {
        let env = chain(4, vec![1], 4);
        let p = PolicyParams::new(4, 1.0).unwrap();
        let f = initialize_roots(&env, 3, &p, &settings(8, 4, 2)).unwrap();
        assert_eq!(f.roots().len(), 4);
        assert_eq!(f.ledger().current(), 4);
        assert!(f.nodes().iter().all(|n| n.observation == f.nodes()[0].observation));
    }

    #[test]
    fn m_equal_n_never_branches() {
        let env = chain(5, vec![2], 4);
        let s = RolloutSettings { history_length: 0, ..settings(4, 4, 2) };
        let f = run_episode_forest(&env, 0, &explore_everywhere(4, 30.0), &s).unwrap();
        assert_eq!(f.leaf_count(), 4);
        assert_eq!(f.branch_events(), 0);
        assert!(f.branch_requests() > 0);
    }

    #[test]
    fn zero_explore_gives_independent_chains() {
        let env = chain(5, vec![2], 4);
        let s = RolloutSettings { history_length: 0, ..settings(8, 4, 2) };
        let f = run_episode_forest(&env, 0, &explore_everywhere(4, -30.0), &s).unwrap();
        let c = f.step_counts();
        assert_eq!(f.leaf_count(), 4);
        assert_eq!(c.tree_steps, c.chain_steps);
        assert_eq!(c.tree_steps, 20);
    }

    #[test]
    fn always_explore_doubles_to_budget() {
        let env = chain(4, vec![1], 4);
        let s = RolloutSettings { history_length: 0, ..settings(8, 1, 2) };
        let f = run_episode_forest(&env, 0, &explore_everywhere(4, 30.0), &s).unwrap();
        assert_eq!(f.leaf_count(), 8);
        // 1 -> 2 -> 4 -> 8 across the first three expansion depths.
        let depth_of_last_branch = f.nodes().iter().filter(|n| n.children.len() == 2).map(|n| n.step).max();
        assert_eq!(depth_of_last_branch, Some(2));
        f.check_invariants().unwrap();
    }

    #[test]
    fn redecide_replaces_flagged_decision() {
        let env = chain(4, vec![1], 4);
        let s = RolloutSettings { history_length: 0, semantics: BranchSemantics::Redecide, ..settings(8, 1, 2) };
        let f = run_episode_forest(&env, 0, &explore_everywhere(4, 30.0), &s).unwrap();
        assert_eq!(f.leaf_count(), 8);
        let with_trigger: Vec<_> = f.nodes().iter().filter(|n| n.trigger.is_some()).collect();
        assert_eq!(with_trigger.len(), f.branch_events());
        assert!(with_trigger.iter().all(|n| n.trigger.unwrap().explore_flag));
        // Root-level flags cannot branch under redecide: a single root.
        assert_eq!(f.roots().len(), 1);
    }

    #[test]
    fn growth_is_deterministic() {
        let env = EnvSpec::ObjectSearch(ObjectSearchSpec { locations: 4, target_location: None, horizon: 6 });
        let p = PolicyParams::new(5, 1.0).unwrap();
        let a = run_episode_forest(&env, 9, &p, &settings(8, 4, 2)).unwrap();
        let b = run_episode_forest(&env, 9, &p, &settings(8, 4, 2)).unwrap();
        let prov = BTreeMap::new();
        assert_eq!(a.to_jsonl(9, &prov), b.to_jsonl(9, &prov));
        let c = run_episode_forest(&env, 10, &p, &settings(8, 4, 2)).unwrap();
        assert_ne!(a.to_jsonl(9, &prov), c.to_jsonl(9, &prov));
    }

    #[test]
    fn fixed_trigger_extremes() {
        let env = chain(6, vec![2], 4);
        let p = PolicyParams::new(4, 1.0).unwrap();
        let never = grow_forest(&env, 1, &p, &settings(8, 4, 2), Trigger::Fixed(0.0)).unwrap();
        assert_eq!(never.leaf_count(), 4);
        let always = grow_forest(&env, 1, &p, &settings(8, 4, 2), Trigger::Fixed(1.0)).unwrap();
        assert_eq!(always.leaf_count(), 8);
        assert!(grow_forest(&env, 1, &p, &settings(8, 4, 2), Trigger::Fixed(1.5)).is_err());
    }

    #[test]
    fn coverage_extremes_and_errors() {
        let spec = KeyStateChainSpec::single_desirable(3, vec![1], 4);
        let sure = policy_with_mass(&spec, 1.0, 1.0, 5).unwrap();
        assert_eq!(pivotal_coverage_probability(&spec, &sure, 2, 200, 5, 0).unwrap(), 1.0);
        let never = policy_with_mass(&spec, 0.0, 1.0, 5).unwrap();
        assert_eq!(pivotal_coverage_probability(&spec, &never, 3, 200, 5, 0).unwrap(), 0.0);
        assert!(pivotal_coverage_probability(&spec, &sure, 2, 0, 5, 0).is_err());
        let two = KeyStateChainSpec::single_desirable(3, vec![0, 1], 4);
        assert!(pivotal_coverage_probability(&two, &sure, 2, 10, 5, 0).is_err());
    }

    #[test]
    fn policy_with_mass_hits_target() {
        let spec = KeyStateChainSpec::single_desirable(3, vec![1], 4);
        let env = EnvSpec::KeyStateChain(spec.clone());
        for q in [0.1, 0.3, 0.5, 0.9] {
            let p = policy_with_mass(&spec, q, 0.4, 5).unwrap();
            let got = crate::policy::true_q(&env, &p, 1, 5).unwrap();
            assert!((got - q).abs() < 1e-12, "q={q} got {got}");
        }
    }

    #[test]
    fn coverage_matches_closed_form() {
        let spec = KeyStateChainSpec::single_desirable(3, vec![1], 4);
        for (q, b) in [(0.5, 2usize), (0.3, 3)] {
            let p = policy_with_mass(&spec, q, 1.0, 5).unwrap();
            let trials = 20_000;
            let est = pivotal_coverage_probability(&spec, &p, b, trials, 5, 4).unwrap();
            let exact = 1.0 - (1.0 - q).powi(b as i32);
            let sigma = (exact * (1.0 - exact) / trials as f64).sqrt();
            assert!((est - exact).abs() <= 3.0 * sigma, "q={q} b={b}: {est} vs {exact}");
        }
    }
}
