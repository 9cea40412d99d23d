//! Withdrawal cost metrics, entropy, Huffman construction and the closed-form
//! bounds on tree depth and normalized withdrawal cost.
//!
//! All logarithms are base 2.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::key_tree::{check_member_set, KeyTree, Member, NodeId, TreeError};

/// Slack used by the inequality checks in this module.
pub const CHECK_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("bound inapplicable: {0}")]
    Inapplicable(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Constants appearing in the depth and cost bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundConstants {
    /// Golden ratio `(1 + √5) / 2`.
    pub alpha: f64,
    /// `1 / log α`.
    pub k1: f64,
    /// `(1 / log α) · log(√5 / α)`.
    pub k2: f64,
    /// Threshold weight minimizing the single-anchor depth decomposition.
    pub t_m: f64,
    pub k3: f64,
    pub k4: f64,
}

impl BoundConstants {
    pub fn new() -> Self {
        let alpha = (1.0 + 5f64.sqrt()) / 2.0;
        let la = alpha.log2();
        let k1 = 1.0 / la;
        let k2 = k1 * (5f64.sqrt() / alpha).log2();
        let t_m = (2.0 + la) / (2.0 * (1.0 - la));
        let k3 = -(3.0 * la / (2.0 * (1.0 - la))).log2()
            + k1 * ((3.0 / (1.0 - la)).log2() + (5f64.sqrt() / alpha).log2());
        let log_e = std::f64::consts::LOG2_E;
        let k4 = -(k1 - 1.0) * (k1 - 1.0).log2()
            + k1 * (2.0 * 5f64.sqrt() * std::f64::consts::E / (alpha * log_e)).log2();
        Self {
            alpha,
            k1,
            k2,
            t_m,
            k3,
            k4,
        }
    }

    /// Outer anchor threshold for the two-anchor decomposition used with the
    /// join-aware greedy policy.
    pub fn t_tilde(&self, p_max: f64) -> f64 {
        let la = self.alpha.log2();
        ((2.0 + la) * p_max + 4.0 + la) / (2.0 * (1.0 - la))
    }

    /// Inner anchor threshold for the two-anchor decomposition.
    pub fn s_tilde(&self, p_min: f64) -> f64 {
        std::f64::consts::LOG2_E / (2.0 * self.alpha.log2()) * p_min + 1.0
    }
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self::new()
    }
}

/// Withdrawal cost summary of one tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n: usize,
    #[serde(rename = "P_G")]
    pub total_weight: f64,
    #[serde(rename = "P_max")]
    pub p_max: f64,
    #[serde(rename = "P_min")]
    pub p_min: f64,
    /// `L = Σ P_M d_M`
    #[serde(rename = "L")]
    pub expected_cost: f64,
    /// `l = L / P_G`
    #[serde(rename = "l")]
    pub normalized_cost: f64,
    /// `H(P)` in bits.
    pub entropy: f64,
}

impl CostReport {
    /// `l ≥ H(P)` up to [`CHECK_SLACK`].
    pub fn satisfies_source_coding_bound(&self) -> bool {
        self.normalized_cost >= self.entropy - CHECK_SLACK
    }

    /// Checks `0 < P_min ≤ P_max ≤ 1` and `n·P_min ≤ P_G ≤ n·P_max`.
    pub fn check_coherent(&self) -> Result<(), BoundError> {
        check_prob_range(self.p_max, self.p_min)?;
        if self.n == 0 {
            return Err(BoundError::InvalidInput("n must be ≥ 1".into()));
        }
        let n = self.n as f64;
        let tol = CHECK_SLACK * n.max(1.0);
        if self.total_weight < n * self.p_min - tol || self.total_weight > n * self.p_max + tol {
            return Err(BoundError::InvalidInput(format!(
                "P_G = {} lies outside [n·P_min, n·P_max] = [{}, {}]",
                self.total_weight,
                n * self.p_min,
                n * self.p_max
            )));
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 7] = ["n", "P_G", "P_max", "P_min", "L", "l", "entropy"];

    /// One CSV record (with header) for this report.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

fn check_prob_range(p_max: f64, p_min: f64) -> Result<(), BoundError> {
    if !(p_min > 0.0 && p_min <= p_max && p_max <= 1.0) {
        return Err(BoundError::InvalidInput(format!(
            "need 0 < P_min ≤ P_max ≤ 1, got P_min = {p_min}, P_max = {p_max}"
        )));
    }
    Ok(())
}

/// Entropy in bits of the distribution obtained by normalizing `weights`.
pub fn entropy<I: IntoIterator<Item = f64>>(weights: I) -> f64 {
    let weights: Vec<f64> = weights.into_iter().collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -weights
        .iter()
        .map(|&w| w / total)
        .filter(|&q| q > 0.0)
        .map(|q| q * q.log2())
        .sum::<f64>()
}

pub fn withdrawal_costs(tree: &KeyTree) -> Result<CostReport, TreeError> {
    if tree.is_empty() {
        return Err(TreeError::EmptyTree);
    }
    let mut n = 0;
    let mut total = 0.0;
    let mut expected = 0.0;
    let mut p_max = f64::MIN;
    let mut p_min = f64::MAX;
    let mut probs = Vec::with_capacity(tree.len());
    for (_, m, depth) in tree.leaves_with_depth() {
        n += 1;
        total += m.p();
        expected += m.p() * depth as f64;
        p_max = p_max.max(m.p());
        p_min = p_min.min(m.p());
        probs.push(m.p());
    }
    Ok(CostReport {
        n,
        total_weight: total,
        p_max,
        p_min,
        expected_cost: expected,
        normalized_cost: expected / total,
        entropy: entropy(probs),
    })
}

/// `(k·log n, log n / k)` with `k = P_min / P_max`.
///
/// The lower value only bounds the entropy once the group is large enough that
/// every normalized probability is small; callers should not rely on it for
/// small groups.
pub fn entropy_bounds(n: usize, p_max: f64, p_min: f64) -> Result<(f64, f64), BoundError> {
    if n == 0 {
        return Err(BoundError::InvalidInput("n must be ≥ 1".into()));
    }
    check_prob_range(p_max, p_min)?;
    let k = p_min / p_max;
    let log_n = (n as f64).log2();
    Ok((k * log_n, log_n / k))
}

#[derive(Clone, Copy)]
struct HeapEntry {
    weight: f64,
    created: usize,
    node: NodeId,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Reversed so that BinaryHeap pops the lightest, then earliest-created entry.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .weight
            .total_cmp(&self.weight)
            .then_with(|| other.created.cmp(&self.created))
    }
}

/// Bottom-up Huffman merge. Equal weights merge the earliest-created subtrees
/// first; the first one popped becomes the left child.
pub fn build_huffman(members: &[Member]) -> Result<KeyTree, TreeError> {
    check_member_set(members)?;
    let mut tree = KeyTree::new();
    let mut heap = BinaryHeap::with_capacity(members.len());
    for (created, m) in members.iter().enumerate() {
        let node = tree.new_leaf(*m)?;
        heap.push(HeapEntry {
            weight: m.p(),
            created,
            node,
        });
    }
    let mut created = members.len();
    while heap.len() > 1 {
        let a = heap.pop().expect("len > 1");
        let b = heap.pop().expect("len > 1");
        let node = tree.new_internal(a.node, b.node);
        heap.push(HeapEntry {
            weight: tree.weight(node)?,
            created,
            node,
        });
        created += 1;
    }
    let root = heap.pop().expect("non-empty member set").node;
    tree.set_root(root);
    Ok(tree)
}

/// `K1·H(P) + K2`, the earlier bound on `l` for greedy trees.
pub fn selcuk_l_bound(report: &CostReport) -> f64 {
    let c = BoundConstants::new();
    c.k1 * report.entropy + c.k2
}

/// `K1·(log P_G − log P_M) + K2`, the earlier per-leaf depth bound.
pub fn selcuk_depth_bound(p_m: f64, p_g: f64) -> f64 {
    let c = BoundConstants::new();
    c.k1 * (p_g.log2() - p_m.log2()) + c.k2
}

/// Depth bound for a leaf of weight `p_m` in a large greedy (`Alg1`) tree:
/// `log P_G − K1 log P_M + (K1 − 1) log P_max + log(1 − P_max/P_G) + K3`.
pub fn thm3_depth_bound(p_m: f64, p_g: f64, p_max: f64) -> Result<f64, BoundError> {
    check_prob_range(p_max, p_m)?;
    if p_g < p_max {
        return Err(BoundError::InvalidInput(format!(
            "P_G = {p_g} is smaller than P_max = {p_max}"
        )));
    }
    let c = BoundConstants::new();
    let slack = 1.0 - p_max / p_g;
    if slack <= 0.0 {
        return Err(BoundError::Inapplicable(
            "1 − P_max/P_G ≤ 0 (tree too small)".into(),
        ));
    }
    Ok(p_g.log2() - c.k1 * p_m.log2() + (c.k1 - 1.0) * p_max.log2() + slack.log2() + c.k3)
}

/// Bound on `l` for a large greedy (`Alg1`) tree:
/// `H(P) + (K1 − 1) log(P_max/P_min) + log(1 − P_max/P_G) + K3`.
pub fn thm4_l_bound(report: &CostReport) -> Result<f64, BoundError> {
    report.check_coherent()?;
    let c = BoundConstants::new();
    let slack = 1.0 - report.p_max / report.total_weight;
    if slack <= 0.0 {
        return Err(BoundError::Inapplicable(
            "1 − P_max/P_G ≤ 0 (tree too small)".into(),
        ));
    }
    Ok(report.entropy + (c.k1 - 1.0) * (report.p_max / report.p_min).log2() + slack.log2() + c.k3)
}

/// Bound on `l` for a large join-aware greedy (`Alg3`) tree:
/// `H(P) + log P_max + (K1 − 1) log(3P_max + 5) − K1 log P_min
///  + (P_max + 4)/P_min + log(1 − (P_max + 2)/P_G) + K4`.
pub fn thm5_l_bound(report: &CostReport) -> Result<f64, BoundError> {
    report.check_coherent()?;
    let c = BoundConstants::new();
    let (p_max, p_min) = (report.p_max, report.p_min);
    let slack = 1.0 - (p_max + 2.0) / report.total_weight;
    if slack <= 0.0 {
        return Err(BoundError::Inapplicable(
            "P_G ≤ P_max + 2 (tree too small)".into(),
        ));
    }
    Ok(report.entropy + p_max.log2() + (c.k1 - 1.0) * (3.0 * p_max + 5.0).log2()
        - c.k1 * p_min.log2()
        + (p_max + 4.0) / p_min
        + slack.log2()
        + c.k4)
}

/// `−log P_G ≤ log(1/P_min) − H(P)`, within [`CHECK_SLACK`].
pub fn lemma3_check(report: &CostReport) -> bool {
    -report.total_weight.log2() <= -report.p_min.log2() - report.entropy + CHECK_SLACK
}

/// Whether every leaf has an ancestor heavier than `t_m`, the size condition
/// under which [`thm3_depth_bound`] applies.
pub fn thm3_hypothesis(tree: &KeyTree) -> bool {
    // The root is an ancestor of every leaf, so this reduces to a root check
    // once there are at least two leaves.
    tree.len() >= 2 && tree.total_weight() > BoundConstants::new().t_m
}

/// Whether every leaf `M` has anchors `X` (nearest strict ancestor with
/// `P_X > s̃_m`) and `Y` (nearest strict ancestor of `X` with `P_Y > t̃_m`),
/// the size condition under which [`thm5_l_bound`] applies.
pub fn thm5_hypothesis(tree: &KeyTree) -> bool {
    let (Ok(p_max), Ok(p_min)) = (tree.max_member_prob(), tree.min_member_prob()) else {
        return false;
    };
    let c = BoundConstants::new();
    let (s, t) = (c.s_tilde(p_min), c.t_tilde(p_max));
    if t <= p_max + 2.0 {
        return false;
    }
    tree.leaves_with_depth().all(|(leaf, _, _)| {
        let mut cur = tree.parent(leaf).ok().flatten();
        let mut inner_found = false;
        while let Some(id) = cur {
            let w = tree.weight(id).unwrap_or(0.0);
            if !inner_found {
                inner_found = w > s;
            } else if w > t {
                return true;
            }
            cur = tree.parent(id).ok().flatten();
        }
        false
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key_tree::{MemberId, Shape};

    fn members(ps: &[f64]) -> Vec<Member> {
        ps.iter()
            .enumerate()
            .map(|(i, &p)| Member::new(MemberId(i as u64), p).unwrap())
            .collect()
    }

    #[test]
    fn constants_match_published_decimals() {
        let c = BoundConstants::new();
        assert!((1.4404..=1.4405).contains(&c.k1), "{}", c.k1);
        assert!((0.67..=0.675).contains(&c.k2), "{}", c.k2);
        assert!((4.40..=4.41).contains(&c.t_m), "{}", c.t_m);
        assert!((3.6..=3.7).contains(&c.k3), "{}", c.k3);
        assert!((3.9..=4.0).contains(&c.k4), "{}", c.k4);
        for p in [0.1, 0.5, 0.9, 1.0] {
            assert!((c.t_tilde(p) - (c.t_m * p + 7.676)).abs() < 1e-2);
            assert!((c.s_tilde(p) - (1.040 * p + 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn costs_of_symmetric_pair() {
        let tree = build_huffman(&members(&[0.5, 0.5])).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        assert_eq!(r.expected_cost, 1.0);
        assert_eq!(r.normalized_cost, 1.0);
        assert!((r.entropy - 1.0).abs() < 1e-15);
    }

    #[test]
    fn costs_of_four_member_huffman_tree() {
        let tree = build_huffman(&members(&[0.4, 0.3, 0.2, 0.1])).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        assert!((r.normalized_cost - 1.9).abs() < 1e-12);
        // -Σ q log2 q for {0.4, 0.3, 0.2, 0.1}, evaluated independently.
        assert!((r.entropy - 1.846_439_344_671_015).abs() < 1e-12);
    }

    #[test]
    fn costs_of_single_leaf() {
        let tree = build_huffman(&members(&[0.3])).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        assert_eq!(r.normalized_cost, 0.0);
        assert_eq!(r.entropy, 0.0);
        assert_eq!(withdrawal_costs(&KeyTree::new()).unwrap_err(), TreeError::EmptyTree);
    }

    #[test]
    fn entropy_bounds_examples() {
        assert_eq!(entropy_bounds(8, 0.4, 0.4).unwrap(), (3.0, 3.0));
        assert_eq!(entropy_bounds(1, 0.9, 0.1).unwrap(), (0.0, 0.0));
        let (lo, hi) = entropy_bounds(1024, 0.9, 0.1).unwrap();
        assert!((lo - 10.0 / 9.0).abs() < 1e-12);
        assert!((hi - 90.0).abs() < 1e-9);
        assert!(entropy_bounds(0, 0.5, 0.5).is_err());
        assert!(entropy_bounds(4, 0.2, 0.5).is_err());
        let uniform = entropy(vec![0.4; 8]);
        assert!((uniform - 3.0).abs() < 1e-12);
    }

    #[test]
    fn huffman_balanced_for_powers_of_two() {
        for k in 0..6 {
            let tree = build_huffman(&members(&vec![0.25; 1 << k])).unwrap();
            let r = withdrawal_costs(&tree).unwrap();
            assert!((r.normalized_cost - k as f64).abs() < 1e-12);
            assert!(tree.leaves_with_depth().all(|(_, _, d)| d == k));
        }
    }

    #[test]
    fn huffman_tie_break_is_input_order() {
        let a = build_huffman(&members(&[0.5, 0.5, 0.5])).unwrap();
        let b = build_huffman(&members(&[0.5, 0.5, 0.5])).unwrap();
        assert_eq!(a.to_snapshot(), b.to_snapshot());
        // Members 0 and 1 are merged first, so member 2 sits at depth 1.
        let d2 = a.depth(a.leaf_of(MemberId(2)).unwrap()).unwrap();
        assert_eq!(d2, 1);
        let balanced = KeyTree::build_from_members(&members(&[0.5, 0.5]), Shape::Huffman).unwrap();
        assert!(balanced.validate().is_empty());
    }

    #[test]
    fn selcuk_bound_values() {
        let c = BoundConstants::new();
        let mut r = withdrawal_costs(&build_huffman(&members(&[1.0])).unwrap()).unwrap();
        assert!((selcuk_l_bound(&r) - c.k2).abs() < 1e-15);
        r.entropy = 1.0;
        assert!((selcuk_l_bound(&r) - 2.11269).abs() < 1e-4);
    }

    #[test]
    fn thm4_equal_probabilities_drops_ratio_term() {
        let tree = build_huffman(&members(&vec![0.5; 64])).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        let c = BoundConstants::new();
        let bound = thm4_l_bound(&r).unwrap();
        let expected = r.entropy + (1.0 - 0.5 / 32.0f64).log2() + c.k3;
        assert!((bound - expected).abs() < 1e-12);
        assert!(bound < r.entropy + c.k3);
    }

    #[test]
    fn bounds_report_inapplicable_for_small_trees() {
        let tree = build_huffman(&members(&[0.9, 0.8])).unwrap();
        let r = withdrawal_costs(&tree).unwrap();
        assert!(matches!(thm5_l_bound(&r), Err(BoundError::Inapplicable(_))));
        let single = withdrawal_costs(&build_huffman(&members(&[0.9])).unwrap()).unwrap();
        assert!(matches!(thm4_l_bound(&single), Err(BoundError::Inapplicable(_))));
        assert!(matches!(
            thm3_depth_bound(0.9, 0.9, 0.9),
            Err(BoundError::Inapplicable(_))
        ));
        assert!(matches!(
            thm3_depth_bound(0.5, 0.4, 0.9),
            Err(BoundError::InvalidInput(_))
        ));
    }

    #[test]
    fn thm3_at_large_weight_is_finite() {
        let c = BoundConstants::new();
        let v = thm3_depth_bound(0.5, 1e4 * 0.5, 0.5).unwrap();
        let expected = 5000f64.log2() - c.k1 * 0.5f64.log2()
            + (c.k1 - 1.0) * 0.5f64.log2()
            + (1.0 - 0.5 / 5000.0f64).log2()
            + c.k3;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn incoherent_report_is_rejected() {
        let mut r = withdrawal_costs(&build_huffman(&members(&[0.5, 0.5, 0.5])).unwrap()).unwrap();
        r.total_weight = 10.0;
        assert!(matches!(thm4_l_bound(&r), Err(BoundError::InvalidInput(_))));
    }

    #[test]
    fn weight_entropy_inequality_examples() {
        // Uniform: both sides are −log2(n·p).
        let r = withdrawal_costs(&build_huffman(&members(&[0.3; 16])).unwrap()).unwrap();
        assert!(lemma3_check(&r));
        assert!((-r.total_weight.log2() - (-(0.3f64).log2() - r.entropy)).abs() < 1e-12);
        let single = withdrawal_costs(&build_huffman(&members(&[1.0])).unwrap()).unwrap();
        assert!(lemma3_check(&single));
    }

    #[test]
    fn cost_report_field_names() {
        let r = withdrawal_costs(&build_huffman(&members(&[0.5, 0.25])).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        for key in CostReport::CSV_HEADER {
            assert!(v.get(key).is_some(), "{key}");
        }
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CostReport::CSV_HEADER.join(","));
        assert_eq!(csv.lines().count(), 2);
    }
}
