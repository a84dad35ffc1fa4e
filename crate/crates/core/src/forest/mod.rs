//! Trajectory forests: an arena of executed steps grown under a global leaf
//! budget.
//!
//! A node is one executed step `(observation, decision, outcome)`. Roots
//! share the initial observation; children continue from their parent's
//! post-step state. The [`BudgetLedger`] counts leaf slots: a branch of
//! effective size `b` consumes `b - 1` new slots because the parent's slot
//! passes to its first child.

mod export;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvSnapshot, Observation, StepOutcome};
use crate::policy::{HistoryKey, StepDecision};
use crate::scalar::Scalar;

pub use export::{ForestHeader, FOREST_FORMAT_VERSION};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("budget violation at node {node}: granted {granted}, got {requested} children")]
    BudgetViolation { node: NodeId, granted: usize, requested: usize },
    #[error("node {0} is not an active leaf")]
    NotActive(NodeId),
    #[error("node {0} already holds a branching grant")]
    AlreadyGranted(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("forest already has {0} roots")]
    RootLimit(usize),
    #[error("{0} leaves are still active")]
    NotFinished(usize),
    #[error("forest structure: {0}")]
    Structure(String),
    #[error("forest document: {0}")]
    Format(String),
}

/// Leaf-slot accounting for one forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    budget: usize,
    current: usize,
    roots: usize,
    branching: usize,
}

impl BudgetLedger {
    pub fn new(budget: usize, roots: usize, branching: usize) -> Result<Self, ForestError> {
        if roots == 0 {
            return Err(ForestError::InvalidBudget("need at least one root".into()));
        }
        if roots > budget {
            return Err(ForestError::InvalidBudget(format!(
                "roots ({roots}) exceed budget ({budget})"
            )));
        }
        if branching < 2 {
            return Err(ForestError::InvalidBudget(format!(
                "branching factor must be at least 2, got {branching}"
            )));
        }
        Ok(BudgetLedger { budget, current: 0, roots, branching })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Leaf slots in use (active and completed).
    pub fn current(&self) -> usize {
        self.current
    }

    pub fn roots(&self) -> usize {
        self.roots
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.current
    }

    /// `min(requested, N - N_current + 1)`.
    pub fn effective_branching(&self, requested: usize) -> usize {
        requested.max(1).min(self.budget - self.current + 1)
    }

    fn charge(&mut self, slots: usize) {
        self.current += slots;
        assert!(self.current <= self.budget, "leaf budget exceeded");
    }
}

/// Fields of a node before it is placed in the arena.
#[derive(Debug, Clone)]
pub struct NodeDraft<T> {
    pub history_key: HistoryKey,
    pub observation: Observation,
    pub decision: StepDecision<T>,
    pub outcome: StepOutcome,
    pub snapshot: EnvSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ForestNode<T> {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Step index `t` of this node's decision.
    pub step: usize,
    pub history_key: HistoryKey,
    pub observation: Observation,
    pub decision: StepDecision<T>,
    pub outcome: StepOutcome,
    pub children: Vec<NodeId>,
    /// Explore-flagged decision replaced by this node's children, when the
    /// branch was triggered at the children's own step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<StepDecision<T>>,
    pub snapshot_ref: Option<NodeId>,
}

impl<T> ForestNode<T> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Completed root-to-leaf trajectories of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub task_seed: u64,
    pub leaves: Vec<NodeId>,
    /// Node ids root first.
    pub paths: Vec<Vec<NodeId>>,
    pub success: Vec<bool>,
    pub invalid_steps: Vec<usize>,
}

impl TrajectoryGroup {
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn successes(&self) -> usize {
        self.success.iter().filter(|&&s| s).count()
    }
}

/// Steps generated by the forest versus what independent chains ending at
/// the same leaves would have generated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub tree_steps: usize,
    pub chain_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectoryForest<T> {
    roots: Vec<NodeId>,
    nodes: Vec<ForestNode<T>>,
    ledger: BudgetLedger,
    horizon: usize,
    snapshots: BTreeMap<NodeId, EnvSnapshot>,
    grants: BTreeMap<NodeId, usize>,
    branch_requests: usize,
}

impl<T: Scalar> TrajectoryForest<T> {
    pub fn new(ledger: BudgetLedger, horizon: usize) -> Self {
        TrajectoryForest {
            roots: Vec::new(),
            nodes: Vec::new(),
            ledger,
            horizon,
            snapshots: BTreeMap::new(),
            grants: BTreeMap::new(),
            branch_requests: 0,
        }
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn nodes(&self) -> &[ForestNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&ForestNode<T>, ForestError> {
        self.nodes.get(id).ok_or(ForestError::UnknownNode(id))
    }

    pub fn snapshot(&self, id: NodeId) -> Option<&EnvSnapshot> {
        self.snapshots.get(&id)
    }

    fn push(&mut self, parent: Option<NodeId>, step: usize, draft: NodeDraft<T>) -> NodeId {
        let id = self.nodes.len();
        let terminal = draft.outcome.terminal;
        self.nodes.push(ForestNode {
            id,
            parent,
            step,
            history_key: draft.history_key,
            observation: draft.observation,
            decision: draft.decision,
            outcome: draft.outcome,
            children: Vec::new(),
            trigger: None,
            snapshot_ref: (!terminal).then_some(id),
        });
        if !terminal {
            self.snapshots.insert(id, draft.snapshot);
        }
        id
    }

    /// Adds a step-0 root, charging one leaf slot.
    pub fn add_root(&mut self, draft: NodeDraft<T>) -> Result<NodeId, ForestError> {
        if self.roots.len() >= self.ledger.roots {
            return Err(ForestError::RootLimit(self.roots.len()));
        }
        self.ledger.charge(1);
        let id = self.push(None, 0, draft);
        self.roots.push(id);
        Ok(id)
    }

    /// A leaf that can still take a step.
    pub fn is_active(&self, id: NodeId) -> bool {
        self.nodes.get(id).is_some_and(|n| {
            n.is_leaf() && !n.outcome.terminal && n.step + 1 < self.horizon
        })
    }

    pub fn active_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&id| self.is_active(id)).collect()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Reserve `effective_branching(requested)` child slots for an active leaf.
    pub fn grant(&mut self, id: NodeId, requested: usize) -> Result<usize, ForestError> {
        if !self.is_active(id) {
            return Err(ForestError::NotActive(id));
        }
        if self.grants.contains_key(&id) {
            return Err(ForestError::AlreadyGranted(id));
        }
        if requested > 1 {
            self.branch_requests += 1;
        }
        let granted = self.ledger.effective_branching(requested);
        self.ledger.charge(granted - 1);
        self.grants.insert(id, granted);
        Ok(granted)
    }

    /// Append children to a leaf holding a grant of exactly `drafts.len()`.
    pub fn add_children(
        &mut self,
        id: NodeId,
        drafts: Vec<NodeDraft<T>>,
    ) -> Result<Vec<NodeId>, ForestError> {
        if !self.is_active(id) {
            return Err(ForestError::NotActive(id));
        }
        let granted = self.grants.get(&id).copied().unwrap_or(0);
        if drafts.len() != granted || granted == 0 {
            return Err(ForestError::BudgetViolation { node: id, granted, requested: drafts.len() });
        }
        self.grants.remove(&id);
        let step = self.nodes[id].step + 1;
        let ids: Vec<NodeId> = drafts.into_iter().map(|d| self.push(Some(id), step, d)).collect();
        self.nodes[id].children = ids.clone();
        // Only branch points keep their snapshot.
        if ids.len() == 1 {
            self.snapshots.remove(&id);
            self.nodes[id].snapshot_ref = None;
        }
        Ok(ids)
    }

    pub fn record_trigger(&mut self, id: NodeId, decision: StepDecision<T>) -> Result<(), ForestError> {
        let node = self.nodes.get_mut(id).ok_or(ForestError::UnknownNode(id))?;
        node.trigger = Some(decision);
        Ok(())
    }

    /// Node ids from the root down to `id`.
    pub fn path(&self, id: NodeId) -> Result<Vec<NodeId>, ForestError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(parent) = cur.parent {
            path.push(parent);
            cur = self.node(parent)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Grants that asked for more than one child, whether or not the
    /// budget allowed it.
    pub fn branch_requests(&self) -> usize {
        self.branch_requests
    }

    /// Nodes that received two or more children.
    pub fn branch_events(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.len() >= 2).count()
    }

    /// Nodes whose children were expanded (the decisions points at which a
    /// branch could have been requested).
    pub fn expansions(&self) -> usize {
        self.nodes.iter().filter(|n| !n.children.is_empty()).count()
    }

    pub fn step_counts(&self) -> StepCounts {
        let chain_steps = self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.step + 1).sum();
        StepCounts { tree_steps: self.nodes.len(), chain_steps }
    }

    pub fn is_finished(&self) -> bool {
        self.active_leaves().is_empty()
    }

    pub fn extract_group(&self, task_seed: u64) -> Result<TrajectoryGroup, ForestError> {
        let active = self.active_leaves().len();
        if active > 0 {
            return Err(ForestError::NotFinished(active));
        }
        let leaves = self.leaves();
        let mut group = TrajectoryGroup {
            task_seed,
            leaves: leaves.clone(),
            paths: Vec::with_capacity(leaves.len()),
            success: Vec::with_capacity(leaves.len()),
            invalid_steps: Vec::with_capacity(leaves.len()),
        };
        for leaf in leaves {
            let path = self.path(leaf)?;
            group.success.push(self.nodes[leaf].outcome.success);
            group.invalid_steps.push(
                path.iter().filter(|&&n| self.nodes[n].outcome.invalid_action).count(),
            );
            group.paths.push(path);
        }
        Ok(group)
    }

    /// Structural and budget invariants.
    pub fn check_invariants(&self) -> Result<(), ForestError> {
        let err = |m: String| Err(ForestError::Structure(m));
        if self.roots.is_empty() || self.roots.len() > self.ledger.roots {
            return err(format!("{} roots for a ledger of {}", self.roots.len(), self.ledger.roots));
        }
        if self.ledger.current > self.ledger.budget {
            return err("ledger over budget".into());
        }
        let leaves = self.leaf_count();
        if leaves > self.ledger.budget {
            return err(format!("{leaves} leaves exceed budget {}", self.ledger.budget));
        }
        for node in &self.nodes {
            match node.parent {
                None if !self.roots.contains(&node.id) => {
                    return err(format!("node {} has no parent", node.id))
                }
                Some(p) if p >= node.id || !self.nodes[p].children.contains(&node.id) => {
                    return err(format!("node {} has inconsistent parent {p}", node.id))
                }
                Some(p) if node.step != self.nodes[p].step + 1 => {
                    return err(format!("node {} skips a step", node.id))
                }
                _ => {}
            }
            if node.outcome.terminal && !node.children.is_empty() {
                return err(format!("terminal node {} has children", node.id));
            }
            if node.step >= self.horizon {
                return err(format!("node {} beyond horizon", node.id));
            }
            if node.children.iter().any(|&c| self.nodes.get(c).map(|n| n.parent) != Some(Some(node.id))) {
                return err(format!("node {} lists a foreign child", node.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ActionId;
    use proptest::prelude::*;

    fn draft(step: usize, terminal: bool) -> NodeDraft<f64> {
        NodeDraft {
            history_key: HistoryKey::from_raw(format!("o{step}")),
            observation: Observation { payload: vec![step as u16], step_index: step },
            decision: StepDecision {
                explore_flag: false,
                action: ActionId(0),
                logprob_action: -1.0,
                logprob_flag: -0.5,
            },
            outcome: StepOutcome {
                observation: Observation { payload: vec![step as u16 + 1], step_index: step + 1 },
                terminal,
                success: false,
                invalid_action: false,
            },
            snapshot: EnvSnapshot::from_bytes(vec![step as u8]),
        }
    }

    fn ledger(n: usize, m: usize, b: usize) -> BudgetLedger {
        BudgetLedger::new(n, m, b).unwrap()
    }

    #[test]
    fn effective_branching_clamps_to_budget() {
        let mut l = ledger(8, 4, 2);
        l.charge(5);
        assert_eq!(l.effective_branching(2), 2);
        l.charge(3);
        assert_eq!(l.effective_branching(2), 1);
        let mut l = ledger(8, 4, 3);
        l.charge(7);
        assert_eq!(l.effective_branching(3), 2);
    }

    #[test]
    fn ledger_rejects_bad_configs() {
        assert!(BudgetLedger::new(4, 5, 2).is_err());
        assert!(BudgetLedger::new(4, 2, 1).is_err());
        assert!(BudgetLedger::new(4, 0, 2).is_err());
    }

    #[test]
    fn single_child_keeps_leaf_count_and_branch_adds_one() {
        let mut f = TrajectoryForest::new(ledger(8, 1, 2), 5);
        let r = f.add_root(draft(0, false)).unwrap();
        assert_eq!(f.grant(r, 1).unwrap(), 1);
        let c = f.add_children(r, vec![draft(1, false)]).unwrap();
        assert_eq!(f.leaf_count(), 1);
        assert_eq!(f.grant(c[0], 2).unwrap(), 2);
        f.add_children(c[0], vec![draft(2, false), draft(2, false)]).unwrap();
        assert_eq!(f.leaf_count(), 2);
        assert_eq!(f.ledger().current(), 2);
        f.check_invariants().unwrap();
    }

    #[test]
    fn exceeding_a_grant_is_a_budget_violation() {
        let mut f = TrajectoryForest::new(ledger(2, 2, 2), 5);
        let r = f.add_root(draft(0, false)).unwrap();
        f.add_root(draft(0, false)).unwrap();
        assert_eq!(f.grant(r, 2).unwrap(), 1);
        assert!(matches!(
            f.add_children(r, vec![draft(1, false), draft(1, false)]),
            Err(ForestError::BudgetViolation { granted: 1, requested: 2, .. })
        ));
        let mut g = TrajectoryForest::new(ledger(4, 1, 2), 5);
        let r = g.add_root(draft(0, false)).unwrap();
        assert!(matches!(g.add_children(r, vec![draft(1, false)]), Err(ForestError::BudgetViolation { .. })));
        assert!(matches!(g.add_root(draft(0, false)), Err(ForestError::RootLimit(1))));
    }

    #[test]
    fn terminal_leaves_cannot_grow() {
        let mut f = TrajectoryForest::new(ledger(4, 1, 2), 5);
        let r = f.add_root(draft(0, true)).unwrap();
        assert_eq!(f.grant(r, 2), Err(ForestError::NotActive(r)));
        assert!(f.is_finished());
        assert!(f.snapshot(r).is_none());
    }

    #[test]
    fn group_extraction_requires_finished_forest() {
        let mut f = TrajectoryForest::new(ledger(8, 4, 2), 3);
        for _ in 0..4 {
            f.add_root(draft(0, false)).unwrap();
        }
        assert!(matches!(f.extract_group(0), Err(ForestError::NotFinished(4))));
        for r in 0..4 {
            f.grant(r, 1).unwrap();
            f.add_children(r, vec![draft(1, true)]).unwrap();
        }
        let g = f.extract_group(0).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.paths[0], vec![0, 4]);
    }

    #[test]
    fn one_branch_event_gives_five_leaves() {
        let mut f = TrajectoryForest::new(ledger(8, 4, 2), 2);
        for _ in 0..4 {
            f.add_root(draft(0, false)).unwrap();
        }
        for r in 0..4 {
            let b = if r == 0 { 2 } else { 1 };
            let g = f.grant(r, b).unwrap();
            f.add_children(r, (0..g).map(|_| draft(1, false)).collect()).unwrap();
        }
        assert!(f.is_finished());
        assert_eq!(f.extract_group(0).unwrap().len(), 5);
        assert_eq!(f.branch_events(), 1);
    }

    #[test]
    fn step_counts_for_chain_and_shared_prefix() {
        let mut f = TrajectoryForest::new(ledger(1, 1, 2), 5);
        let mut cur = f.add_root(draft(0, false)).unwrap();
        for s in 1..5 {
            f.grant(cur, 1).unwrap();
            cur = f.add_children(cur, vec![draft(s, false)]).unwrap()[0];
        }
        assert_eq!(f.step_counts(), StepCounts { tree_steps: 5, chain_steps: 5 });

        // Shared 3-step prefix, then two 2-step tails.
        let mut f = TrajectoryForest::new(ledger(2, 1, 2), 5);
        let mut cur = f.add_root(draft(0, false)).unwrap();
        for s in 1..3 {
            f.grant(cur, 1).unwrap();
            cur = f.add_children(cur, vec![draft(s, false)]).unwrap()[0];
        }
        f.grant(cur, 2).unwrap();
        let kids = f.add_children(cur, vec![draft(3, false), draft(3, false)]).unwrap();
        for k in kids {
            f.grant(k, 1).unwrap();
            f.add_children(k, vec![draft(4, false)]).unwrap();
        }
        assert_eq!(f.step_counts(), StepCounts { tree_steps: 7, chain_steps: 10 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_grants_never_exceed_budget(
            budget in 2usize..16,
            roots_frac in 0.0f64..1.0,
            branching in 2usize..5,
            ops in prop::collection::vec((any::<prop::sample::Index>(), 1usize..5, any::<bool>()), 1..160),
        ) {
            let roots = 1 + ((budget - 1) as f64 * roots_frac) as usize;
            let mut f = TrajectoryForest::new(ledger(budget, roots, branching), 12);
            for _ in 0..roots {
                f.add_root(draft(0, false)).unwrap();
            }
            for (pick, requested, terminal) in ops {
                let active = f.active_leaves();
                if active.is_empty() {
                    break;
                }
                let id = *pick.get(&active);
                let granted = f.grant(id, requested.min(branching)).unwrap();
                let step = f.node(id).unwrap().step + 1;
                f.add_children(id, (0..granted).map(|_| draft(step, terminal)).collect()).unwrap();
                prop_assert!(f.leaf_count() <= budget);
                prop_assert!(f.ledger().current() <= budget);
                prop_assert_eq!(f.leaf_count(), f.ledger().current());
            }
            f.check_invariants().unwrap();
            let counts = f.step_counts();
            prop_assert!(counts.tree_steps <= counts.chain_steps);
            prop_assert_eq!(counts.tree_steps == counts.chain_steps, f.branch_events() == 0);
        }
    }
}
