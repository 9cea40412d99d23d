//! Logical key hierarchy tree.
//!
//! Every leaf holds a member's private key, every internal node a subgroup key
//! and the root the group key. Each node carries a weight: the sum of the
//! withdrawal probabilities of the members below it. Nodes live in a
//! generational arena so that a [`NodeId`] keeps resolving across unrelated
//! mutations and a removed node's handle is rejected afterwards.
//!
//! Joins use `Insert(M, X)`: a fresh internal node `N` takes the place of `X`,
//! with `X` and the new leaf as its children. Withdrawals remove the leaf and
//! its parent and promote the sibling into the parent's position.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when comparing cached weights with weights
/// recomputed from the leaves.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(pub u64);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// A group participant and its withdrawal probability `P_M`, always in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMember")]
pub struct Member {
    pub id: MemberId,
    p: f64,
}

#[derive(Deserialize)]
struct RawMember {
    id: MemberId,
    p: f64,
}

impl TryFrom<RawMember> for Member {
    type Error = TreeError;

    fn try_from(raw: RawMember) -> Result<Self, Self::Error> {
        Member::new(raw.id, raw.p)
    }
}

impl Member {
    pub fn new(id: MemberId, p: f64) -> Result<Self, TreeError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TreeError::InvalidProbability { id, p });
        }
        Ok(Self { id, p })
    }

    #[inline]
    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Handle to a tree node: an arena slot plus the generation the slot had when
/// the node was allocated. Serialized as `generation << 32 | slot`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u64", from = "u64")]
pub struct NodeId {
    slot: u32,
    gen: u32,
}

impl From<NodeId> for u64 {
    fn from(id: NodeId) -> u64 {
        (u64::from(id.gen) << 32) | u64::from(id.slot)
    }
}

impl From<u64> for NodeId {
    fn from(raw: u64) -> NodeId {
        NodeId {
            slot: raw as u32,
            gen: (raw >> 32) as u32,
        }
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}.{}", self.slot, self.gen)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("member list is empty")]
    EmptyMembers,
    #[error("duplicate member id {0}")]
    DuplicateMember(MemberId),
    #[error("withdrawal probability {p} of member {id} is outside (0, 1]")]
    InvalidProbability { id: MemberId, p: f64 },
    #[error("unknown or removed node {0}")]
    InvalidNode(NodeId),
    #[error("unknown member {0}")]
    UnknownMember(MemberId),
    #[error("tree is empty")]
    EmptyTree,
    #[error("tree already has members; insert at a node instead")]
    NotEmpty,
    #[error("malformed tree snapshot: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Balanced,
    Huffman,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationKind {
    Join,
    Withdraw,
}

/// Record of one membership change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeMutation {
    pub kind: MutationKind,
    pub member: Member,
    pub created: Vec<NodeId>,
    pub removed: Vec<NodeId>,
    /// Keys that must change, root first. A join lists the path root..N
    /// (`d_X + 1` keys, N freshly keyed). A withdrawal lists the `d_M` strict
    /// ancestors of the departing leaf; the deepest of them is the collapsed
    /// parent, which is retired rather than re-issued.
    pub refreshed: Vec<NodeId>,
    /// The member's root-to-leaf path: after insertion for a join, before
    /// removal for a withdrawal.
    pub path: Vec<NodeId>,
    /// `d_X` (depth of the insertion point before the join) or `d_M` (depth of
    /// the leaf before the withdrawal).
    pub depth: usize,
}

impl TreeMutation {
    /// Number of keys on the rekey path: `d_X + 1` for a join, `d_M` for a
    /// withdrawal.
    pub fn rekey_cost(&self) -> usize {
        self.refreshed.len()
    }

    /// Number of new key values the server generates: refreshed keys that
    /// survive the mutation plus newly created keys. `d_X + 2` for a join
    /// (path keys and the newcomer's private key), `d_M - 1` for a withdrawal
    /// at depth ≥ 1.
    pub fn keys_issued(&self) -> usize {
        let surviving = self
            .refreshed
            .iter()
            .filter(|n| !self.removed.contains(n))
            .count();
        let fresh = self
            .created
            .iter()
            .filter(|n| !self.refreshed.contains(n))
            .count();
        surviving + fresh
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    RootHasParent,
    BrokenParentLink,
    DanglingChild(NodeId),
    LeafWithoutMember,
    InternalWithMember,
    MemberIndexMismatch(MemberId),
    ProbabilityOutOfRange(f64),
    WeightMismatch { cached: f64, recomputed: f64 },
    UnreachableNode,
    Cycle,
    MemberCountMismatch { indexed: usize, leaves: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "{n}: {:?}", self.kind),
            None => write!(f, "tree: {:?}", self.kind),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) parent: Option<NodeId>,
    pub(crate) children: Option<[NodeId; 2]>,
    pub(crate) weight: f64,
    version: u64,
    member: Option<Member>,
}

#[derive(Clone, Debug)]
struct Slot {
    gen: u32,
    node: Option<Node>,
}

#[derive(Clone, Debug, Default)]
pub struct KeyTree {
    slots: Vec<Slot>,
    free: Vec<u32>,
    root: Option<NodeId>,
    leaves: HashMap<MemberId, NodeId>,
}

impl KeyTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build_from_members(members: &[Member], shape: Shape) -> Result<Self, TreeError> {
        match shape {
            Shape::Huffman => crate::analysis::build_huffman(members),
            Shape::Balanced => {
                check_member_set(members)?;
                let mut tree = KeyTree::new();
                let leaves: Vec<NodeId> = members
                    .iter()
                    .map(|m| tree.new_leaf(*m))
                    .collect::<Result<_, _>>()?;
                // Halve recursively so leaf depths differ by at most one.
                fn join(tree: &mut KeyTree, part: &[NodeId]) -> NodeId {
                    if let [only] = part {
                        return *only;
                    }
                    let (l, r) = part.split_at(part.len().div_ceil(2));
                    let (l, r) = (join(tree, l), join(tree, r));
                    tree.new_internal(l, r)
                }
                tree.root = Some(join(&mut tree, &leaves));
                Ok(tree)
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    /// Number of members (leaves).
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn node_count(&self) -> usize {
        // A strictly binary tree with n leaves has 2n - 1 nodes.
        (2 * self.leaves.len()).saturating_sub(1)
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.get(id).is_ok()
    }

    pub(crate) fn get(&self, id: NodeId) -> Result<&Node, TreeError> {
        match self.slots.get(id.slot as usize) {
            Some(Slot {
                gen,
                node: Some(node),
            }) if *gen == id.gen => Ok(node),
            _ => Err(TreeError::InvalidNode(id)),
        }
    }

    fn get_mut(&mut self, id: NodeId) -> Result<&mut Node, TreeError> {
        match self.slots.get_mut(id.slot as usize) {
            Some(Slot {
                gen,
                node: Some(node),
            }) if *gen == id.gen => Ok(node),
            _ => Err(TreeError::InvalidNode(id)),
        }
    }

    pub fn weight(&self, id: NodeId) -> Result<f64, TreeError> {
        Ok(self.get(id)?.weight)
    }

    /// Edge count from the root; the root has depth 0.
    pub fn depth(&self, id: NodeId) -> Result<usize, TreeError> {
        let mut depth = 0;
        let mut cur = self.get(id)?.parent;
        while let Some(p) = cur {
            depth += 1;
            cur = self.get(p)?.parent;
        }
        Ok(depth)
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>, TreeError> {
        Ok(self.get(id)?.parent)
    }

    pub fn children(&self, id: NodeId) -> Result<Option<[NodeId; 2]>, TreeError> {
        Ok(self.get(id)?.children)
    }

    pub fn is_leaf(&self, id: NodeId) -> Result<bool, TreeError> {
        Ok(self.get(id)?.children.is_none())
    }

    pub fn member(&self, id: NodeId) -> Result<Option<Member>, TreeError> {
        Ok(self.get(id)?.member)
    }

    pub fn key_version(&self, id: NodeId) -> Result<u64, TreeError> {
        Ok(self.get(id)?.version)
    }

    pub fn leaf_of(&self, member: MemberId) -> Option<NodeId> {
        self.leaves.get(&member).copied()
    }

    /// `P_G`, the root weight; zero for an empty tree.
    pub fn total_weight(&self) -> f64 {
        self.root
            .and_then(|r| self.get(r).ok())
            .map_or(0.0, |n| n.weight)
    }

    pub fn max_member_prob(&self) -> Result<f64, TreeError> {
        self.members()
            .map(|m| m.p)
            .reduce(f64::max)
            .ok_or(TreeError::EmptyTree)
    }

    pub fn min_member_prob(&self) -> Result<f64, TreeError> {
        self.members()
            .map(|m| m.p)
            .reduce(f64::min)
            .ok_or(TreeError::EmptyTree)
    }

    /// Nodes in preorder (node, left subtree, right subtree).
    pub fn preorder(&self) -> Preorder<'_> {
        Preorder {
            tree: self,
            stack: self.root.map(|r| vec![(r, 0)]).unwrap_or_default(),
        }
    }

    /// Members in preorder of their leaves.
    pub fn members(&self) -> impl Iterator<Item = Member> + '_ {
        self.preorder()
            .filter_map(move |(id, _)| self.get(id).ok().and_then(|n| n.member))
    }

    /// `(leaf, member, d_M)` for every leaf, in preorder.
    pub fn leaves_with_depth(&self) -> impl Iterator<Item = (NodeId, Member, usize)> + '_ {
        self.preorder().filter_map(move |(id, depth)| {
            self.get(id)
                .ok()
                .and_then(|n| n.member)
                .map(|m| (id, m, depth))
        })
    }

    pub fn height(&self) -> Option<usize> {
        self.preorder().map(|(_, d)| d).max()
    }

    /// Root-to-node path, root first.
    pub fn path_from_root(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![id];
        let mut cur = self.get(id)?.parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.get(p)?.parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Current `(node, key version)` pairs in preorder.
    pub fn key_versions(&self) -> Vec<(NodeId, u64)> {
        self.preorder()
            .map(|(id, _)| (id, self.get(id).map_or(0, |n| n.version)))
            .collect()
    }

    /// Picks a member with probability proportional to its weight, given a
    /// uniform variate `u` in `[0, 1)`.
    pub fn sample_member_by_weight(&self, u: f64) -> Option<MemberId> {
        let mut cur = self.root?;
        let mut target = u * self.get(cur).ok()?.weight;
        loop {
            let node = self.get(cur).ok()?;
            match node.children {
                None => return node.member.map(|m| m.id),
                Some([l, r]) => {
                    let wl = self.get(l).ok()?.weight;
                    if target < wl {
                        cur = l;
                    } else {
                        target -= wl;
                        cur = r;
                    }
                }
            }
        }
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        match self.free.pop() {
            Some(slot) => {
                let entry = &mut self.slots[slot as usize];
                entry.node = Some(node);
                NodeId {
                    slot,
                    gen: entry.gen,
                }
            }
            None => {
                let slot = u32::try_from(self.slots.len()).expect("arena exceeds u32 slots");
                self.slots.push(Slot {
                    gen: 0,
                    node: Some(node),
                });
                NodeId { slot, gen: 0 }
            }
        }
    }

    fn release(&mut self, id: NodeId) {
        let entry = &mut self.slots[id.slot as usize];
        entry.node = None;
        entry.gen = entry.gen.wrapping_add(1);
        self.free.push(id.slot);
    }

    pub(crate) fn new_leaf(&mut self, member: Member) -> Result<NodeId, TreeError> {
        if self.leaves.contains_key(&member.id) {
            return Err(TreeError::DuplicateMember(member.id));
        }
        let id = self.alloc(Node {
            parent: None,
            children: None,
            weight: member.p,
            version: 0,
            member: Some(member),
        });
        self.leaves.insert(member.id, id);
        Ok(id)
    }

    /// Joins two parentless subtrees under a new internal node.
    pub(crate) fn new_internal(&mut self, left: NodeId, right: NodeId) -> NodeId {
        let weight = self.slot_node(left).weight + self.slot_node(right).weight;
        let id = self.alloc(Node {
            parent: None,
            children: Some([left, right]),
            weight,
            version: 0,
            member: None,
        });
        self.slot_node_mut(left).parent = Some(id);
        self.slot_node_mut(right).parent = Some(id);
        id
    }

    pub(crate) fn set_root(&mut self, id: NodeId) {
        self.root = Some(id);
    }

    fn slot_node(&self, id: NodeId) -> &Node {
        self.get(id).expect("live node")
    }

    fn slot_node_mut(&mut self, id: NodeId) -> &mut Node {
        self.get_mut(id).expect("live node")
    }

    fn replace_child(&mut self, parent: Option<NodeId>, old: NodeId, new: NodeId) {
        match parent {
            None => self.root = Some(new),
            Some(p) => {
                let children = self
                    .slot_node_mut(p)
                    .children
                    .as_mut()
                    .expect("parent is internal");
                for c in children.iter_mut() {
                    if *c == old {
                        *c = new;
                    }
                }
            }
        }
    }

    /// Recomputes weights from the children and bumps key versions from
    /// `start` up to the root. Returns the visited nodes, root first.
    fn refresh_upwards(&mut self, start: Option<NodeId>) -> Vec<NodeId> {
        let mut visited = Vec::new();
        let mut cur = start;
        while let Some(id) = cur {
            let [l, r] = self.slot_node(id).children.expect("ancestor is internal");
            let weight = self.slot_node(l).weight + self.slot_node(r).weight;
            let node = self.slot_node_mut(id);
            node.weight = weight;
            node.version += 1;
            visited.push(id);
            cur = node.parent;
        }
        visited.reverse();
        visited
    }

    /// Adds the first member to an empty tree.
    pub fn insert_first(&mut self, member: Member) -> Result<TreeMutation, TreeError> {
        if !self.is_empty() {
            return Err(TreeError::NotEmpty);
        }
        let leaf = self.new_leaf(member)?;
        self.root = Some(leaf);
        Ok(TreeMutation {
            kind: MutationKind::Join,
            member,
            created: vec![leaf],
            removed: vec![],
            refreshed: vec![],
            path: vec![leaf],
            depth: 0,
        })
    }

    /// `Insert(M, X)`.
    pub fn insert_at(&mut self, member: Member, x: NodeId) -> Result<TreeMutation, TreeError> {
        let parent = self.get(x)?.parent;
        if self.leaves.contains_key(&member.id) {
            return Err(TreeError::DuplicateMember(member.id));
        }
        let depth = self.depth(x)?;

        let leaf = self.new_leaf(member)?;
        let joint = self.alloc(Node {
            parent,
            children: Some([x, leaf]),
            weight: 0.0,
            version: 0,
            member: None,
        });
        self.slot_node_mut(x).parent = Some(joint);
        self.slot_node_mut(leaf).parent = Some(joint);
        self.replace_child(parent, x, joint);

        let refreshed = self.refresh_upwards(Some(joint));
        debug_assert_eq!(refreshed.len(), depth + 1);
        let mut path = refreshed.clone();
        path.push(leaf);
        Ok(TreeMutation {
            kind: MutationKind::Join,
            member,
            created: vec![joint, leaf],
            removed: vec![],
            refreshed,
            path,
            depth,
        })
    }

    pub fn withdraw(&mut self, member_id: MemberId) -> Result<TreeMutation, TreeError> {
        let leaf = self
            .leaf_of(member_id)
            .ok_or(TreeError::UnknownMember(member_id))?;
        let member = self.slot_node(leaf).member.expect("leaf holds a member");
        let path = self.path_from_root(leaf)?;
        let depth = path.len() - 1;

        let Some(joint) = self.slot_node(leaf).parent else {
            self.leaves.remove(&member_id);
            self.release(leaf);
            self.root = None;
            return Ok(TreeMutation {
                kind: MutationKind::Withdraw,
                member,
                created: vec![],
                removed: vec![leaf],
                refreshed: vec![],
                path,
                depth,
            });
        };

        let [a, b] = self.slot_node(joint).children.expect("parent is internal");
        let sibling = if a == leaf { b } else { a };
        let grandparent = self.slot_node(joint).parent;
        self.slot_node_mut(sibling).parent = grandparent;
        self.replace_child(grandparent, joint, sibling);
        self.leaves.remove(&member_id);
        self.release(leaf);
        self.release(joint);

        self.refresh_upwards(grandparent);
        Ok(TreeMutation {
            kind: MutationKind::Withdraw,
            member,
            created: vec![],
            removed: vec![leaf, joint],
            refreshed: path[..depth].to_vec(),
            path,
            depth,
        })
    }

    /// Full structural audit; weights are recomputed from the leaves.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut flag = |node: Option<NodeId>, kind| out.push(Violation { node, kind });

        let live = self.slots.iter().filter(|s| s.node.is_some()).count();
        let Some(root) = self.root else {
            if live != 0 {
                flag(None, ViolationKind::UnreachableNode);
            }
            if !self.leaves.is_empty() {
                flag(
                    None,
                    ViolationKind::MemberCountMismatch {
                        indexed: self.leaves.len(),
                        leaves: 0,
                    },
                );
            }
            return out;
        };
        match self.get(root) {
            Ok(n) if n.parent.is_some() => flag(Some(root), ViolationKind::RootHasParent),
            Ok(_) => {}
            Err(_) => {
                flag(Some(root), ViolationKind::DanglingChild(root));
                return out;
            }
        }

        // Iterative post-order so deep trees do not overflow the stack.
        let mut seen = HashSet::new();
        let mut recomputed: HashMap<NodeId, f64> = HashMap::new();
        let mut leaf_count = 0usize;
        let mut stack = vec![(root, false)];
        while let Some((id, expanded)) = stack.pop() {
            let node = self.slot_node(id);
            if !expanded {
                if !seen.insert(id) {
                    flag(Some(id), ViolationKind::Cycle);
                    continue;
                }
                match node.children {
                    None => {
                        leaf_count += 1;
                        match node.member {
                            None => {
                                flag(Some(id), ViolationKind::LeafWithoutMember);
                                recomputed.insert(id, 0.0);
                            }
                            Some(m) => {
                                if !(m.p > 0.0 && m.p <= 1.0) {
                                    flag(Some(id), ViolationKind::ProbabilityOutOfRange(m.p));
                                }
                                if self.leaves.get(&m.id) != Some(&id) {
                                    flag(Some(id), ViolationKind::MemberIndexMismatch(m.id));
                                }
                                recomputed.insert(id, m.p);
                            }
                        }
                    }
                    Some(children) => {
                        if node.member.is_some() {
                            flag(Some(id), ViolationKind::InternalWithMember);
                        }
                        stack.push((id, true));
                        for c in children {
                            match self.get(c) {
                                Ok(child) => {
                                    if child.parent != Some(id) {
                                        flag(Some(c), ViolationKind::BrokenParentLink);
                                    }
                                    stack.push((c, false));
                                }
                                Err(_) => flag(Some(id), ViolationKind::DanglingChild(c)),
                            }
                        }
                        continue;
                    }
                }
            } else {
                let [l, r] = node.children.expect("expanded nodes are internal");
                let sum = recomputed.get(&l).copied().unwrap_or(0.0)
                    + recomputed.get(&r).copied().unwrap_or(0.0);
                recomputed.insert(id, sum);
            }
            let expected = recomputed[&id];
            if (node.weight - expected).abs() > WEIGHT_TOLERANCE || node.weight.is_nan() {
                flag(
                    Some(id),
                    ViolationKind::WeightMismatch {
                        cached: node.weight,
                        recomputed: expected,
                    },
                );
            }
        }

        if seen.len() != live {
            for (slot, entry) in self.slots.iter().enumerate() {
                if entry.node.is_some() {
                    let id = NodeId {
                        slot: slot as u32,
                        gen: entry.gen,
                    };
                    if !seen.contains(&id) {
                        flag(Some(id), ViolationKind::UnreachableNode);
                    }
                }
            }
        }
        if leaf_count != self.leaves.len() {
            flag(
                None,
                ViolationKind::MemberCountMismatch {
                    indexed: self.leaves.len(),
                    leaves: leaf_count,
                },
            );
        }
        out
    }

    pub fn to_snapshot(&self) -> TreeSnapshot {
        let nodes = self
            .preorder()
            .map(|(id, _)| {
                let node = self.slot_node(id);
                NodeRecord {
                    id,
                    member_id: node.member.map(|m| m.id),
                    p: node.member.map(|m| m.p),
                    key_version: node.version,
                }
            })
            .collect();
        TreeSnapshot { nodes }
    }

    /// Rebuilds a tree from a preorder listing. Node ids and key versions are
    /// kept; weights are always recomputed.
    pub fn from_snapshot(snapshot: &TreeSnapshot) -> Result<Self, TreeError> {
        let malformed = |msg: String| TreeError::Malformed(msg);
        let mut tree = KeyTree::new();
        if snapshot.nodes.is_empty() {
            return Ok(tree);
        }
        let max_slot = snapshot.nodes.iter().map(|r| r.id.slot).max().unwrap_or(0);
        tree.slots = (0..=max_slot)
            .map(|_| Slot { gen: 0, node: None })
            .collect();

        // Internal nodes waiting for children, with the number attached so far.
        let mut pending: Vec<(NodeId, usize)> = Vec::new();
        let mut done = false;
        for rec in &snapshot.nodes {
            if done {
                return Err(malformed(format!("trailing node {} after complete tree", rec.id)));
            }
            let slot = &mut tree.slots[rec.id.slot as usize];
            if slot.node.is_some() {
                return Err(malformed(format!("duplicate node id {}", rec.id)));
            }
            let (member, children) = match (rec.member_id, rec.p) {
                (Some(mid), Some(p)) => (Some(Member::new(mid, p)?), None),
                (None, None) => (None, Some([rec.id, rec.id])),
                _ => {
                    return Err(malformed(format!(
                        "node {} must carry both member_id and p or neither",
                        rec.id
                    )))
                }
            };
            slot.gen = rec.id.gen;
            slot.node = Some(Node {
                parent: pending.last().map(|(p, _)| *p),
                children,
                weight: member.map_or(0.0, |m| m.p),
                version: rec.key_version,
                member,
            });
            if let Some(m) = member {
                if tree.leaves.insert(m.id, rec.id).is_some() {
                    return Err(TreeError::DuplicateMember(m.id));
                }
            }
            match pending.last_mut() {
                None => tree.root = Some(rec.id),
                Some((parent, filled)) => {
                    let parent = *parent;
                    let at = *filled;
                    *filled += 1;
                    tree.slot_node_mut(parent).children.as_mut().expect("internal")[at] = rec.id;
                }
            }
            if children.is_some() {
                pending.push((rec.id, 0));
            } else {
                while let Some(&(_, 2)) = pending.last() {
                    pending.pop();
                }
            }
            done = pending.is_empty();
        }
        if !pending.is_empty() {
            return Err(malformed("internal node is missing children".into()));
        }
        for (slot, entry) in tree.slots.iter().enumerate().rev() {
            if entry.node.is_none() {
                tree.free.push(slot as u32);
            }
        }
        tree.recompute_all_weights();
        Ok(tree)
    }

    fn recompute_all_weights(&mut self) {
        let order: Vec<NodeId> = self.preorder().map(|(id, _)| id).collect();
        for &id in order.iter().rev() {
            if let Some([l, r]) = self.slot_node(id).children {
                let w = self.slot_node(l).weight + self.slot_node(r).weight;
                self.slot_node_mut(id).weight = w;
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let snapshot: TreeSnapshot =
            serde_json::from_str(text).map_err(|e| TreeError::Malformed(e.to_string()))?;
        Self::from_snapshot(&snapshot)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_weight(&mut self, id: NodeId, weight: f64) {
        self.slot_node_mut(id).weight = weight;
    }
}

pub struct Preorder<'a> {
    tree: &'a KeyTree,
    stack: Vec<(NodeId, usize)>,
}

impl Iterator for Preorder<'_> {
    /// `(node, depth)`
    type Item = (NodeId, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let (id, depth) = self.stack.pop()?;
        if let Ok(Node {
            children: Some([l, r]),
            ..
        }) = self.tree.get(id)
        {
            self.stack.push((*r, depth + 1));
            self.stack.push((*l, depth + 1));
        }
        Some((id, depth))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub nodes: Vec<NodeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_id: Option<MemberId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub key_version: u64,
}

pub(crate) fn check_member_set(members: &[Member]) -> Result<(), TreeError> {
    if members.is_empty() {
        return Err(TreeError::EmptyMembers);
    }
    let mut ids = HashSet::with_capacity(members.len());
    for m in members {
        if !(m.p > 0.0 && m.p <= 1.0) {
            return Err(TreeError::InvalidProbability { id: m.id, p: m.p });
        }
        if !ids.insert(m.id) {
            return Err(TreeError::DuplicateMember(m.id));
        }
    }
    Ok(())
}
