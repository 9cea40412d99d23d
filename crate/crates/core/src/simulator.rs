//! Churn simulation: start from the Huffman tree of `n` members, then repeat
//! `m` rounds of one withdrawal followed by one join, recording the rekey
//! cost of every event.
//!
//! Randomness comes from `ChaCha8Rng` (rand_chacha). Replication `r` of a run
//! seeded with `s` uses `seed_from_u64(s)` on stream `r`. Sweep cell `i` with
//! base seed `b` is seeded with `splitmix64(b + (i + 1)·0x9E3779B97F4A7C15)`.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{build_huffman, withdrawal_costs, CostReport};
use crate::key_tree::{KeyTree, Member, MemberId, MutationKind, TreeError, TreeMutation};
use crate::policies::{select, Policy, PolicyError};
use crate::rekey::{EpochError, KeyEpoch};

pub const RNG_NAME: &str = "ChaCha8Rng";
pub const SEED_RULE: &str =
    "replication r: ChaCha8Rng::seed_from_u64(seed) on stream r; sweep cell i: splitmix64(base + (i+1)*0x9E3779B97F4A7C15)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbDist {
    Uniform { lo: f64, hi: f64 },
}

impl Default for ProbDist {
    fn default() -> Self {
        ProbDist::Uniform { lo: 0.1, hi: 0.9 }
    }
}

impl ProbDist {
    fn sampler(&self) -> Uniform<f64> {
        match *self {
            ProbDist::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WithdrawRule {
    /// Departing member drawn with probability proportional to `P_M`.
    #[default]
    Weighted,
    /// Departing member drawn uniformly from the group.
    Uniform,
}

impl std::str::FromStr for WithdrawRule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted" => Ok(WithdrawRule::Weighted),
            "uniform" => Ok(WithdrawRule::Uniform),
            other => Err(ConfigError::UnknownWithdrawRule(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub m: usize,
    pub policy: Policy,
    pub prob_dist: ProbDist,
    pub withdraw_rule: WithdrawRule,
    pub seed: u64,
    pub replications: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 100,
            m: 10_000,
            policy: Policy::Alg1,
            prob_dist: ProbDist::default(),
            withdraw_rule: WithdrawRule::default(),
            seed: 0,
            replications: 20,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("n must be ≥ 2, got {0}")]
    GroupTooSmall(usize),
    #[error("m must be ≥ 1")]
    NoChurn,
    #[error("replications must be ≥ 1")]
    NoReplications,
    #[error("probability range must satisfy 0 < lo ≤ hi ≤ 1, got [{lo}, {hi}]")]
    BadDistribution { lo: f64, hi: f64 },
    #[error("unknown withdraw rule {0:?} (expected weighted or uniform)")]
    UnknownWithdrawRule(String),
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 2 {
            return Err(ConfigError::GroupTooSmall(self.n));
        }
        if self.m < 1 {
            return Err(ConfigError::NoChurn);
        }
        if self.replications < 1 {
            return Err(ConfigError::NoReplications);
        }
        let ProbDist::Uniform { lo, hi } = self.prob_dist;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(ConfigError::BadDistribution { lo, hi });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Epoch(#[from] EpochError),
}

/// Event totals of one replication. `join_cost` sums `d_X + 1`,
/// `withdraw_cost` sums `d_M`; the `*_keys_issued` totals count new key values
/// (`d_X + 2` per join, `d_M − 1` per withdrawal).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTotals {
    pub joins: u64,
    pub withdrawals: u64,
    pub join_cost: u64,
    pub withdraw_cost: u64,
    pub join_keys_issued: u64,
    pub withdraw_keys_issued: u64,
}

impl EventTotals {
    fn add(&mut self, mutation: &TreeMutation) {
        let cost = mutation.rekey_cost() as u64;
        let issued = mutation.keys_issued() as u64;
        match mutation.kind {
            MutationKind::Join => {
                self.joins += 1;
                self.join_cost += cost;
                self.join_keys_issued += issued;
            }
            MutationKind::Withdraw => {
                self.withdrawals += 1;
                self.withdraw_cost += cost;
                self.withdraw_keys_issued += issued;
            }
        }
    }

    /// Totals recomputed from an epoch's refreshed sets and version diffs.
    pub fn from_epoch(epoch: &KeyEpoch) -> Self {
        let mut t = EventTotals::default();
        for e in epoch.entries() {
            let cost = e.mutation.refreshed.len() as u64;
            let issued = e.keys_issued() as u64;
            match e.mutation.kind {
                MutationKind::Join => {
                    t.joins += 1;
                    t.join_cost += cost;
                    t.join_keys_issued += issued;
                }
                MutationKind::Withdraw => {
                    t.withdrawals += 1;
                    t.withdraw_cost += cost;
                    t.withdraw_keys_issued += issued;
                }
            }
        }
        t
    }

    fn mean(total: u64, count: u64) -> f64 {
        if count == 0 {
            0.0
        } else {
            total as f64 / count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationStats {
    pub index: usize,
    pub avg_join_cost: f64,
    pub avg_withdraw_cost: f64,
    pub avg_join_keys_issued: f64,
    pub avg_withdraw_keys_issued: f64,
    pub totals: EventTotals,
    /// Nodes examined by the insertion policy over all joins.
    pub selection_visits: u64,
    pub final_tree: CostReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation across replications (0 for one replication).
    pub stddev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub rng: String,
    pub seed_rule: String,
    pub avg_join_cost: Summary,
    pub avg_withdraw_cost: Summary,
    pub avg_join_keys_issued: Summary,
    pub avg_withdraw_keys_issued: Summary,
    /// Cost report of replication 0's final tree.
    pub final_tree: CostReport,
    pub replications: Vec<ReplicationStats>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: [&'static str; 16] = [
        "policy",
        "n",
        "m",
        "withdraw_rule",
        "seed",
        "replications",
        "avg_join_cost",
        "avg_join_cost_sd",
        "avg_withdraw_cost",
        "avg_withdraw_cost_sd",
        "avg_join_keys_issued",
        "avg_join_keys_issued_sd",
        "avg_withdraw_keys_issued",
        "avg_withdraw_keys_issued_sd",
        "final_l",
        "final_entropy",
    ];

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let rule = match c.withdraw_rule {
            WithdrawRule::Weighted => "weighted",
            WithdrawRule::Uniform => "uniform",
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory csv");
        let row = [
            c.policy.to_string(),
            c.n.to_string(),
            c.m.to_string(),
            rule.to_string(),
            c.seed.to_string(),
            c.replications.to_string(),
            self.avg_join_cost.mean.to_string(),
            self.avg_join_cost.stddev.to_string(),
            self.avg_withdraw_cost.mean.to_string(),
            self.avg_withdraw_cost.stddev.to_string(),
            self.avg_join_keys_issued.mean.to_string(),
            self.avg_join_keys_issued.stddev.to_string(),
            self.avg_withdraw_keys_issued.mean.to_string(),
            self.avg_withdraw_keys_issued.stddev.to_string(),
            self.final_tree.normalized_cost.to_string(),
            self.final_tree.entropy.to_string(),
        ];
        w.write_record(&row).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

/// Everything one replication produces.
#[derive(Clone, Debug)]
pub struct Replication {
    pub stats: ReplicationStats,
    pub tree: KeyTree,
    pub epoch: Option<KeyEpoch>,
}

fn replication_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Departing-member picker for the uniform rule; the weighted rule samples
/// straight from the tree weights.
struct Roster {
    ids: Vec<MemberId>,
    pos: HashMap<MemberId, usize>,
}

impl Roster {
    fn new(ids: impl IntoIterator<Item = MemberId>) -> Self {
        let ids: Vec<MemberId> = ids.into_iter().collect();
        let pos = ids.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        Self { ids, pos }
    }

    fn remove(&mut self, id: MemberId) {
        if let Some(i) = self.pos.remove(&id) {
            self.ids.swap_remove(i);
            if let Some(&moved) = self.ids.get(i) {
                self.pos.insert(moved, i);
            }
        }
    }

    fn push(&mut self, id: MemberId) {
        self.pos.insert(id, self.ids.len());
        self.ids.push(id);
    }
}

pub fn run_replication(
    config: &SimulationConfig,
    index: usize,
    record_epoch: bool,
) -> Result<Replication, SimError> {
    config.validate()?;
    let mut rng = replication_rng(config.seed, index);
    let probs = config.prob_dist.sampler();

    let members = (0..config.n)
        .map(|i| Member::new(MemberId(i as u64), probs.sample(&mut rng)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tree = build_huffman(&members)?;
    let mut epoch = record_epoch.then(|| KeyEpoch::start(&tree));
    let mut roster = match config.withdraw_rule {
        WithdrawRule::Uniform => Some(Roster::new(members.iter().map(|m| m.id))),
        WithdrawRule::Weighted => None,
    };

    let mut totals = EventTotals::default();
    let mut visits = 0u64;
    for next_id in (config.n as u64..).take(config.m) {
        let victim = match roster.as_ref() {
            None => tree
                .sample_member_by_weight(rng.gen::<f64>())
                .ok_or(TreeError::EmptyTree)?,
            Some(r) => r.ids[rng.gen_range(0..r.ids.len())],
        };
        let left = tree.withdraw(victim)?;
        totals.add(&left);
        if let Some(r) = roster.as_mut() {
            r.remove(victim);
        }
        if let Some(e) = epoch.as_mut() {
            e.record(&tree, left)?;
        }

        let newcomer = Member::new(MemberId(next_id), probs.sample(&mut rng))?;
        let at = select(&tree, config.policy, newcomer.p())?;
        visits += at.visits as u64;
        let joined = tree.insert_at(newcomer, at.node)?;
        totals.add(&joined);
        if let Some(r) = roster.as_mut() {
            r.push(newcomer.id);
        }
        if let Some(e) = epoch.as_mut() {
            e.record(&tree, joined)?;
        }
    }

    let stats = ReplicationStats {
        index,
        avg_join_cost: EventTotals::mean(totals.join_cost, totals.joins),
        avg_withdraw_cost: EventTotals::mean(totals.withdraw_cost, totals.withdrawals),
        avg_join_keys_issued: EventTotals::mean(totals.join_keys_issued, totals.joins),
        avg_withdraw_keys_issued: EventTotals::mean(totals.withdraw_keys_issued, totals.withdrawals),
        totals,
        selection_visits: visits,
        final_tree: withdrawal_costs(&tree)?,
    };
    Ok(Replication { stats, tree, epoch })
}

/// Runs every replication (in parallel on the rayon pool) and aggregates them
/// in replication order.
pub fn run(config: &SimulationConfig) -> Result<SimulationReport, SimError> {
    config.validate()?;
    let stats = (0..config.replications)
        .into_par_iter()
        .map(|i| run_replication(config, i, false).map(|r| r.stats))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(config, stats))
}

fn summarize(config: &SimulationConfig, stats: Vec<ReplicationStats>) -> SimulationReport {
    let pick = |f: fn(&ReplicationStats) -> f64| Summary::of(&stats.iter().map(f).collect::<Vec<_>>());
    SimulationReport {
        config: config.clone(),
        rng: RNG_NAME.to_string(),
        seed_rule: SEED_RULE.to_string(),
        avg_join_cost: pick(|s| s.avg_join_cost),
        avg_withdraw_cost: pick(|s| s.avg_withdraw_cost),
        avg_join_keys_issued: pick(|s| s.avg_join_keys_issued),
        avg_withdraw_keys_issued: pick(|s| s.avg_withdraw_keys_issued),
        final_tree: stats[0].final_tree,
        replications: stats,
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn cell_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(base_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Runs each configuration with its seed replaced by [`cell_seed`].
pub fn sweep(configs: &[SimulationConfig], base_seed: u64) -> Vec<Result<SimulationReport, SimError>> {
    configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut c = c.clone();
            c.seed = cell_seed(base_seed, i);
            run(&c)
        })
        .collect()
}

/// The full published grid: rows `Alg1..Alg4`, columns
/// `(n, m) ∈ {100, 10000} × {100, 10000}`, in row-major order.
pub fn table_grid(template: &SimulationConfig) -> Vec<SimulationConfig> {
    let mut out = Vec::with_capacity(16);
    for policy in Policy::ALL {
        for n in [100, 10_000] {
            for m in [100, 10_000] {
                out.push(SimulationConfig {
                    n,
                    m,
                    policy,
                    ..template.clone()
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableMetric {
    /// New key values per event (`d_X + 2` joins, `d_M − 1` withdrawals).
    #[default]
    KeysIssued,
    /// Rekey path length (`d_X + 1` joins, `d_M` withdrawals).
    PathLength,
}

impl std::str::FromStr for TableMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keys-issued" => Ok(TableMetric::KeysIssued),
            "path-length" => Ok(TableMetric::PathLength),
            other => Err(format!("unknown metric {other:?} (expected keys-issued or path-length)")),
        }
    }
}

/// Join and withdrawal tables as CSV: one row per policy, one column per
/// `(n, m)` pair in first-seen order, two decimals.
pub fn render_tables(reports: &[SimulationReport], metric: TableMetric) -> (String, String) {
    let mut columns: Vec<(usize, usize)> = Vec::new();
    for r in reports {
        let key = (r.config.n, r.config.m);
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let render = |value: fn(&SimulationReport, TableMetric) -> f64| {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["algorithm".to_string()];
        header.extend(columns.iter().map(|(n, m)| format!("n={n} m={m}")));
        w.write_record(&header).expect("in-memory csv");
        for policy in Policy::ALL {
            if !reports.iter().any(|r| r.config.policy == policy) {
                continue;
            }
            let mut row = vec![policy.to_string()];
            for &(n, m) in &columns {
                let cell = reports
                    .iter()
                    .find(|r| r.config.policy == policy && r.config.n == n && r.config.m == m)
                    .map(|r| format!("{:.2}", value(r, metric)))
                    .unwrap_or_default();
                row.push(cell);
            }
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    };
    let join = render(|r, m| match m {
        TableMetric::KeysIssued => r.avg_join_keys_issued.mean,
        TableMetric::PathLength => r.avg_join_cost.mean,
    });
    let withdraw = render(|r, m| match m {
        TableMetric::KeysIssued => r.avg_withdraw_keys_issued.mean,
        TableMetric::PathLength => r.avg_withdraw_cost.mean,
    });
    (join, withdraw)
}
