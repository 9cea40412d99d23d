//! Test oracles and generators shared by the integration suites.
#![allow(dead_code)]

use lkh_core::key_tree::{KeyTree, Member, MemberId, MutationKind, NodeId};
use lkh_core::policies::{select, Policy};
use lkh_core::rekey::KeyEpoch;
use rand::Rng;

pub fn members_from(probs: &[f64]) -> Vec<Member> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| Member::new(MemberId(i as u64), p).unwrap())
        .collect()
}

pub fn random_probs<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Multiples of 1/64 in (0, 1]; exact in binary, so cost ties are real ties.
pub fn dyadic_probs<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(1..=64) as f64 / 64.0).collect()
}

/// Shannon entropy of the normalized distribution, straight from the formula.
pub fn entropy_oracle(probs: &[f64]) -> f64 {
    let total: f64 = probs.iter().sum();
    probs
        .iter()
        .map(|p| {
            let q = p / total;
            -q * q.log2()
        })
        .sum()
}

/// Leaf-depth vectors of every rooted full binary tree whose leaves are
/// labelled `0..n`: leaf `k` is grafted above each of the `2k − 1` nodes of
/// every tree on `k` leaves, giving each of the `(2n − 3)!!` trees once.
pub fn all_depth_vectors(n: usize) -> Vec<Vec<usize>> {
    #[derive(Clone)]
    enum T {
        Leaf(usize),
        Node(Box<T>, Box<T>),
    }
    fn count(t: &T) -> usize {
        match t {
            T::Leaf(_) => 1,
            T::Node(a, b) => 1 + count(a) + count(b),
        }
    }
    // Graft `leaf` above the node with preorder index `target`.
    fn graft(t: &T, target: usize, leaf: usize, idx: &mut usize) -> T {
        let here = *idx;
        *idx += 1;
        let rebuilt = match t {
            T::Leaf(l) => T::Leaf(*l),
            T::Node(a, b) => {
                let a = graft(a, target, leaf, idx);
                let b = graft(b, target, leaf, idx);
                T::Node(Box::new(a), Box::new(b))
            }
        };
        if here == target {
            T::Node(Box::new(rebuilt), Box::new(T::Leaf(leaf)))
        } else {
            rebuilt
        }
    }
    fn depths(t: &T, d: usize, out: &mut [usize]) {
        match t {
            T::Leaf(l) => out[*l] = d,
            T::Node(a, b) => {
                depths(a, d + 1, out);
                depths(b, d + 1, out);
            }
        }
    }
    assert!(n >= 1);
    let mut trees = vec![T::Leaf(0)];
    for leaf in 1..n {
        let mut next = Vec::new();
        for t in &trees {
            for target in 0..count(t) {
                next.push(graft(t, target, leaf, &mut 0));
            }
        }
        trees = next;
    }
    trees
        .iter()
        .map(|t| {
            let mut out = vec![0; n];
            depths(t, 0, &mut out);
            out
        })
        .collect()
}

/// Minimum of `Σ p_i d_i` over every tree shape, by enumeration.
pub fn optimal_cost_exhaustive(probs: &[f64]) -> f64 {
    all_depth_vectors(probs.len())
        .iter()
        .map(|d| probs.iter().zip(d).map(|(p, &d)| p * d as f64).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// `Σ P_M d_M` from the leaf depths.
pub fn expected_cost(tree: &KeyTree) -> f64 {
    tree.leaves_with_depth().map(|(_, m, d)| m.p() * d as f64).sum()
}

/// Builds a tree purely by policy-driven insertions.
pub fn grow(policy: Policy, members: &[Member]) -> KeyTree {
    let mut tree = KeyTree::new();
    for &m in members {
        if tree.is_empty() {
            tree.insert_first(m).unwrap();
        } else {
            let at = select(&tree, policy, m.p()).unwrap();
            tree.insert_at(m, at.node).unwrap();
        }
    }
    tree
}

/// Random shape: each member is grafted above a uniformly chosen node.
pub fn random_shape<R: Rng>(rng: &mut R, members: &[Member]) -> KeyTree {
    let mut tree = KeyTree::new();
    for &m in members {
        if tree.is_empty() {
            tree.insert_first(m).unwrap();
        } else {
            let nodes: Vec<NodeId> = tree.preorder().map(|(id, _)| id).collect();
            let at = nodes[rng.gen_range(0..nodes.len())];
            tree.insert_at(m, at).unwrap();
        }
    }
    tree
}

/// Largest `|P_X − P_S|` over sibling pairs.
pub fn max_sibling_gap(tree: &KeyTree) -> f64 {
    tree.preorder()
        .filter_map(|(id, _)| tree.children(id).unwrap())
        .map(|[l, r]| (tree.weight(l).unwrap() - tree.weight(r).unwrap()).abs())
        .fold(0.0, f64::max)
}

/// Random membership history driven by `policy`: joins and withdrawals in
/// random order, group size kept within `[1, max_n]`.
pub fn random_history<R: Rng>(rng: &mut R, policy: Policy, max_n: usize, events: usize) -> (KeyTree, KeyEpoch) {
    let n0 = rng.gen_range(1..=max_n);
    let probs = random_probs(rng, n0, 0.05, 1.0);
    let mut tree = lkh_core::build_huffman(&members_from(&probs)).unwrap();
    let mut epoch = KeyEpoch::start(&tree);
    let mut next = n0 as u64;
    for _ in 0..events {
        let join = tree.is_empty() || (tree.len() < max_n && rng.gen_bool(0.5));
        let mutation = if join {
            let m = Member::new(MemberId(next), rng.gen_range(0.05..=1.0)).unwrap();
            next += 1;
            if tree.is_empty() {
                tree.insert_first(m).unwrap()
            } else {
                let at = select(&tree, policy, m.p()).unwrap();
                tree.insert_at(m, at.node).unwrap()
            }
        } else {
            let ids: Vec<MemberId> = tree.members().map(|m| m.id).collect();
            tree.withdraw(ids[rng.gen_range(0..ids.len())]).unwrap()
        };
        assert!(matches!(mutation.kind, MutationKind::Join | MutationKind::Withdraw));
        epoch.record(&tree, mutation).unwrap();
    }
    (tree, epoch)
}

/// Every `(step, node)` single-refresh omission available in `epoch`.
pub fn omission_sites(epoch: &KeyEpoch) -> Vec<(usize, NodeId)> {
    epoch
        .entries()
        .iter()
        .flat_map(|e| e.version_changes.iter().map(move |(n, _)| (e.step, *n)))
        .collect()
}

/// Whether the audit (or the consistency replay) flags the tampered epoch.
pub fn injection_caught(epoch: &KeyEpoch, step: usize, node: NodeId) -> bool {
    let mut tampered = epoch.clone();
    assert!(tampered.omit_refresh(step, node));
    !tampered.audit().all_passed()
}
