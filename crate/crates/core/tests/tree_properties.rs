mod common;

use common::{expected_cost, members_from};
use lkh_core::analysis::withdrawal_costs;
use lkh_core::key_tree::{KeyTree, Member, MemberId, MutationKind, Shape};
use lkh_core::policies::{select, Policy};
use proptest::prelude::*;

fn probs(max_n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..=1.0, 1..=max_n)
}

fn policy() -> impl Strategy<Value = Policy> {
    prop::sample::select(Policy::ALL.to_vec())
}

/// Op stream: `Some(p)` joins a newcomer, `None` withdraws the member at the
/// given roster position (taken modulo the group size).
fn ops() -> impl Strategy<Value = Vec<(Option<f64>, usize)>> {
    prop::collection::vec((prop::option::of(0.01f64..=1.0), any::<usize>()), 0..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutations_preserve_invariants(ps in probs(40), pol in policy(), stream in ops()) {
        let mut tree = KeyTree::build_from_members(&members_from(&ps), Shape::Huffman).unwrap();
        let mut next = ps.len() as u64;
        for (op, pick) in stream {
            let before = tree.len();
            let m = match op {
                Some(p) => {
                    let m = Member::new(MemberId(next), p).unwrap();
                    next += 1;
                    if tree.is_empty() {
                        tree.insert_first(m).unwrap()
                    } else {
                        let at = select(&tree, pol, p).unwrap();
                        let d = tree.depth(at.node).unwrap();
                        let m = tree.insert_at(m, at.node).unwrap();
                        prop_assert_eq!(m.depth, d);
                        prop_assert_eq!(m.rekey_cost(), d + 1);
                        prop_assert_eq!(m.keys_issued(), d + 2);
                        m
                    }
                }
                None if tree.is_empty() => continue,
                None => {
                    let ids: Vec<MemberId> = tree.members().map(|m| m.id).collect();
                    let id = ids[pick % ids.len()];
                    let d = tree.depth(tree.leaf_of(id).unwrap()).unwrap();
                    let m = tree.withdraw(id).unwrap();
                    prop_assert_eq!(m.rekey_cost(), d);
                    prop_assert_eq!(m.keys_issued(), d.saturating_sub(1));
                    m
                }
            };
            let expected_len = match m.kind {
                MutationKind::Join => before + 1,
                MutationKind::Withdraw => before - 1,
            };
            prop_assert_eq!(tree.len(), expected_len);
            prop_assert!(tree.validate().is_empty(), "{:?}", tree.validate());
            if !tree.is_empty() {
                prop_assert_eq!(tree.node_count(), 2 * tree.len() - 1);
                let total: f64 = tree.members().map(|m| m.p()).sum();
                prop_assert!((tree.total_weight() - total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn insert_then_withdraw_restores(ps in probs(40), pol in policy(), p in 0.01f64..=1.0) {
        let mut tree = KeyTree::build_from_members(&members_from(&ps), Shape::Huffman).unwrap();
        let before = tree.to_snapshot();
        let weights: Vec<f64> = tree.preorder().map(|(id, _)| tree.weight(id).unwrap()).collect();
        let at = select(&tree, pol, p).unwrap();
        let id = MemberId(ps.len() as u64);
        tree.insert_at(Member::new(id, p).unwrap(), at.node).unwrap();
        tree.withdraw(id).unwrap();
        let after = tree.to_snapshot();
        let shape = |s: &lkh_core::key_tree::TreeSnapshot| {
            s.nodes.iter().map(|r| (r.id, r.member_id)).collect::<Vec<_>>()
        };
        prop_assert_eq!(shape(&before), shape(&after));
        let restored: Vec<f64> = tree.preorder().map(|(id, _)| tree.weight(id).unwrap()).collect();
        prop_assert_eq!(weights, restored);
    }

    #[test]
    fn snapshot_round_trip(ps in probs(30), shape in prop::sample::select(vec![Shape::Balanced, Shape::Huffman])) {
        let tree = KeyTree::build_from_members(&members_from(&ps), shape).unwrap();
        let back = KeyTree::from_json(&tree.to_json()).unwrap();
        prop_assert_eq!(tree.to_snapshot(), back.to_snapshot());
        prop_assert!(back.validate().is_empty());
    }

    #[test]
    fn cost_report_matches_leaf_sum(ps in probs(50)) {
        let tree = KeyTree::build_from_members(&members_from(&ps), Shape::Balanced).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        prop_assert!((r.expected_cost - expected_cost(&tree)).abs() < 1e-9);
        prop_assert!((r.normalized_cost - r.expected_cost / r.total_weight).abs() < 1e-12);
        prop_assert!((r.entropy - common::entropy_oracle(&ps)).abs() < 1e-9);
        prop_assert!(r.satisfies_source_coding_bound());
    }

    #[test]
    fn balanced_depths_differ_by_at_most_one(n in 1usize..200) {
        let tree = KeyTree::build_from_members(&members_from(&vec![0.5; n]), Shape::Balanced).unwrap();
        let depths: Vec<usize> = tree.leaves_with_depth().map(|(_, _, d)| d).collect();
        let lo = *depths.iter().min().unwrap();
        let hi = *depths.iter().max().unwrap();
        prop_assert!(hi - lo <= 1);
    }
}

#[test]
fn stale_handles_are_rejected() {
    let mut tree = KeyTree::build_from_members(&members_from(&[0.5, 0.3, 0.2]), Shape::Huffman).unwrap();
    let leaf = tree.leaf_of(MemberId(2)).unwrap();
    tree.withdraw(MemberId(2)).unwrap();
    assert!(tree.weight(leaf).is_err());
    tree.insert_at(Member::new(MemberId(9), 0.4).unwrap(), tree.root().unwrap()).unwrap();
    assert!(tree.weight(leaf).is_err());
}
