//! Line-delimited JSON and DOT renderings of a forest.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BudgetLedger, ForestError, ForestNode, TrajectoryForest};
use crate::scalar::Scalar;

pub const FOREST_FORMAT_VERSION: u32 = 1;

/// First line of a forest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestHeader {
    pub format_version: u32,
    pub task_seed: u64,
    pub horizon: usize,
    pub ledger: BudgetLedger,
    pub roots: Vec<usize>,
    pub branch_requests: usize,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl<T: Scalar> TrajectoryForest<T> {
    /// Header line followed by one node per line, in id order.
    pub fn to_jsonl(&self, task_seed: u64, provenance: &BTreeMap<String, String>) -> String {
        let header = ForestHeader {
            format_version: FOREST_FORMAT_VERSION,
            task_seed,
            horizon: self.horizon,
            ledger: self.ledger,
            roots: self.roots.clone(),
            branch_requests: self.branch_requests,
            provenance: provenance.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for node in &self.nodes {
            out.push_str(&serde_json::to_string(node).expect("node serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds the node structure. Snapshots are not part of the document,
    /// so the result is for inspection, not further growth.
    pub fn from_jsonl(text: &str) -> Result<(ForestHeader, Self), ForestError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| ForestError::Format("empty document".into()))?;
        let header: ForestHeader =
            serde_json::from_str(first).map_err(|e| ForestError::Format(format!("header: {e}")))?;
        if header.format_version != FOREST_FORMAT_VERSION {
            return Err(ForestError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut nodes = Vec::new();
        for (i, line) in lines.enumerate() {
            let node: ForestNode<T> = serde_json::from_str(line)
                .map_err(|e| ForestError::Format(format!("node line {}: {e}", i + 2)))?;
            if node.id != i {
                return Err(ForestError::Format(format!("node {} out of order", node.id)));
            }
            nodes.push(node);
        }
        let forest = TrajectoryForest {
            roots: header.roots.clone(),
            nodes,
            ledger: header.ledger,
            horizon: header.horizon,
            snapshots: BTreeMap::new(),
            grants: BTreeMap::new(),
            branch_requests: header.branch_requests,
        };
        forest.check_invariants()?;
        Ok((header, forest))
    }

    /// Graphviz digraph. Edges out of branch points are bold red.
    pub fn to_dot(&self, provenance: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in provenance {
            let _ = writeln!(out, "// {k} = {v}");
        }
        out.push_str("digraph forest {\n  node [shape=box, fontname=\"monospace\"];\n");
        for node in &self.nodes {
            let flag = if node.decision.explore_flag { "*" } else { "" };
            let shape = match (node.outcome.terminal, node.outcome.success) {
                (_, true) => ", style=filled, fillcolor=palegreen",
                (true, false) => ", style=filled, fillcolor=lightgray",
                _ => "",
            };
            let _ = writeln!(
                out,
                "  n{} [label=\"t{} a{}{}\"{}];",
                node.id, node.step, node.decision.action.0, flag, shape
            );
        }
        for node in &self.nodes {
            let style = if node.children.len() >= 2 { " [style=bold, color=red]" } else { "" };
            for child in &node.children {
                let _ = writeln!(out, "  n{} -> n{}{};", node.id, child, style);
            }
        }
        out.push_str("}\n");
        out
    }
}
