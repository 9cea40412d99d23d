//! Insertion-point selection for joining members.
//!
//! `Alg1` descends greedily towards the lighter subtree and stops where the
//! newcomer outweighs both children. `Alg2` scans every node for the minimum
//! cost increase `C = (d_X + 1)·P_M + P_X`. `Alg3` and `Alg4` are the same
//! procedures with `P_M` replaced by `P_M + 1`, which charges the certain
//! `d_X + 1` join rekeys alongside the expected withdrawal cost.
//!
//! Selection never mutates the tree; [`KeyTree::insert_at`] performs the
//! surgery.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::key_tree::{KeyTree, NodeId, TreeError};

/// Two cost increases closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Alg1,
    Alg2,
    Alg3,
    Alg4,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Alg1, Policy::Alg2, Policy::Alg3, Policy::Alg4];

    /// Greedy descent (`Alg1`, `Alg3`) as opposed to a full scan.
    pub fn is_greedy(self) -> bool {
        matches!(self, Policy::Alg1 | Policy::Alg3)
    }

    /// Whether the join cost is charged (`Alg3`, `Alg4`).
    pub fn charges_join(self) -> bool {
        matches!(self, Policy::Alg3 | Policy::Alg4)
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Alg1 => "alg1",
            Policy::Alg2 => "alg2",
            Policy::Alg3 => "alg3",
            Policy::Alg4 => "alg4",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "alg1" => Ok(Policy::Alg1),
            "alg2" => Ok(Policy::Alg2),
            "alg3" => Ok(Policy::Alg3),
            "alg4" => Ok(Policy::Alg4),
            _ => Err(PolicyError::UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("tree is empty")]
    EmptyTree,
    #[error("newcomer probability must be finite and non-negative, got {0}")]
    InvalidProbability(f64),
    #[error("unknown policy {0:?} (expected alg1, alg2, alg3 or alg4)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostIncrease {
    pub node: NodeId,
    pub value: f64,
}

/// Outcome of a selection together with the number of nodes examined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub node: NodeId,
    pub visits: usize,
}

fn check_p(p: f64) -> Result<(), PolicyError> {
    if p.is_finite() && p >= 0.0 {
        Ok(())
    } else {
        Err(PolicyError::InvalidProbability(p))
    }
}

pub fn select(tree: &KeyTree, policy: Policy, p_new: f64) -> Result<Selection, PolicyError> {
    check_p(p_new)?;
    match policy {
        Policy::Alg1 => descend(tree, p_new),
        Policy::Alg2 => scan(tree, p_new),
        Policy::Alg3 => descend(tree, p_new + 1.0),
        Policy::Alg4 => scan(tree, p_new + 1.0),
    }
}

pub fn select_alg1(tree: &KeyTree, p_new: f64) -> Result<NodeId, PolicyError> {
    select(tree, Policy::Alg1, p_new).map(|s| s.node)
}

pub fn select_alg2(tree: &KeyTree, p_new: f64) -> Result<NodeId, PolicyError> {
    select(tree, Policy::Alg2, p_new).map(|s| s.node)
}

pub fn select_alg3(tree: &KeyTree, p_new: f64) -> Result<NodeId, PolicyError> {
    select(tree, Policy::Alg3, p_new).map(|s| s.node)
}

pub fn select_alg4(tree: &KeyTree, p_new: f64) -> Result<NodeId, PolicyError> {
    select(tree, Policy::Alg4, p_new).map(|s| s.node)
}

/// `C_{M,X} = (d_X + 1)·P_M + P_X`.
pub fn cost_increase(tree: &KeyTree, x: NodeId, p_new: f64) -> Result<CostIncrease, PolicyError> {
    let depth = tree.depth(x)?;
    let weight = tree.weight(x)?;
    Ok(CostIncrease {
        node: x,
        value: (depth as f64 + 1.0) * p_new + weight,
    })
}

/// `C*_{M,X} = (d_X + 1)·(P_M + 1) + P_X`.
pub fn cost_increase_starred(
    tree: &KeyTree,
    x: NodeId,
    p_new: f64,
) -> Result<CostIncrease, PolicyError> {
    cost_increase(tree, x, p_new + 1.0)
}

/// Greedy descent: stop at a leaf or where `threshold` is at least both child
/// weights, otherwise move to the lighter child (the right one on ties).
fn descend(tree: &KeyTree, threshold: f64) -> Result<Selection, PolicyError> {
    let mut x = tree.root().ok_or(PolicyError::EmptyTree)?;
    let mut visits = 1;
    loop {
        let Some([l, r]) = tree.children(x)? else {
            return Ok(Selection { node: x, visits });
        };
        let (wl, wr) = (tree.weight(l)?, tree.weight(r)?);
        if threshold >= wl && threshold >= wr {
            return Ok(Selection { node: x, visits });
        }
        x = if wl >= wr { r } else { l };
        visits += 1;
    }
}

/// Full scan for the minimum of `(d_X + 1)·p + P_X`. Ties (within
/// [`TIE_TOLERANCE`] of the minimum) go to the shallowest node, then the
/// earliest in preorder.
fn scan(tree: &KeyTree, p: f64) -> Result<Selection, PolicyError> {
    let root = tree.root().ok_or(PolicyError::EmptyTree)?;
    // Near-minimal candidates in preorder; entries that fall out of the
    // tolerance band when the minimum drops are pruned.
    let mut near: Vec<(f64, usize, NodeId)> = Vec::new();
    let mut best = f64::INFINITY;
    let mut stack = Vec::with_capacity(64);
    stack.push((root, 0usize));
    let mut visits = 0;
    while let Some((id, depth)) = stack.pop() {
        visits += 1;
        let node = tree.get(id)?;
        let c = (depth as f64 + 1.0) * p + node.weight;
        if c <= best + TIE_TOLERANCE {
            if c < best {
                best = c;
                near.retain(|e| e.0 <= best + TIE_TOLERANCE);
            }
            near.push((c, depth, id));
        }
        if let Some([l, r]) = node.children {
            stack.push((r, depth + 1));
            stack.push((l, depth + 1));
        }
    }
    let (_, _, node) = near
        .into_iter()
        .min_by_key(|e| e.1)
        .expect("root is always a candidate");
    Ok(Selection { node, visits })
}

/// Exhaustive argmin of `C` (or `C*` when `starred`) with the same tie rule
/// as `Alg2`/`Alg4`. Depths come from parent walks and weights are re-summed
/// from the member probabilities, independently of the cached values the
/// scan uses.
pub fn brute_force_best(tree: &KeyTree, p_new: f64, starred: bool) -> Result<NodeId, PolicyError> {
    check_p(p_new)?;
    if tree.is_empty() {
        return Err(PolicyError::EmptyTree);
    }
    let nodes: Vec<NodeId> = tree.preorder().map(|(id, _)| id).collect();

    let mut weight = std::collections::HashMap::with_capacity(nodes.len());
    for &id in &nodes {
        if let Some(m) = tree.member(id)? {
            for anc in tree.path_from_root(id)? {
                *weight.entry(anc).or_insert(0.0) += m.p();
            }
        }
    }

    let mut candidates = Vec::with_capacity(nodes.len());
    for (rank, &id) in nodes.iter().enumerate() {
        let d = tree.path_from_root(id)?.len() - 1;
        let w = weight[&id];
        let c = if starred {
            (d as f64 + 1.0) * (p_new + 1.0) + w
        } else {
            (d as f64 + 1.0) * p_new + w
        };
        candidates.push((c, d, rank, id));
    }
    let cmin = candidates
        .iter()
        .map(|c| c.0)
        .fold(f64::INFINITY, f64::min);
    let best = candidates
        .iter()
        .filter(|c| c.0 <= cmin + TIE_TOLERANCE)
        .min_by(|a, b| (a.1, a.2).cmp(&(b.1, b.2)))
        .expect("non-empty");
    Ok(best.3)
}
