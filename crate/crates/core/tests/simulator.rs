use lkh_core::policies::Policy;
use lkh_core::simulator::{
    cell_seed, render_tables, run, run_replication, sweep, EventTotals, ProbDist,
    SimulationConfig, TableMetric, WithdrawRule,
};

fn config(policy: Policy, rule: WithdrawRule) -> SimulationConfig {
    SimulationConfig {
        n: 64,
        m: 300,
        policy,
        withdraw_rule: rule,
        seed: 42,
        replications: 4,
        ..SimulationConfig::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    for policy in Policy::ALL {
        let a = run(&config(policy, WithdrawRule::Weighted)).unwrap();
        let b = run(&config(policy, WithdrawRule::Weighted)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        let mut other = config(policy, WithdrawRule::Weighted);
        other.seed = 43;
        assert_ne!(run(&other).unwrap().to_json(), a.to_json());
    }
}

#[test]
fn averages_match_epoch_version_diffs() {
    for policy in Policy::ALL {
        for rule in [WithdrawRule::Weighted, WithdrawRule::Uniform] {
            let c = config(policy, rule);
            for idx in 0..2 {
                let rep = run_replication(&c, idx, true).unwrap();
                let epoch = rep.epoch.unwrap();
                let t = EventTotals::from_epoch(&epoch);
                assert_eq!(t, rep.stats.totals);
                assert_eq!(t.joins, c.m as u64);
                assert_eq!(t.withdrawals, c.m as u64);
                assert_eq!(rep.stats.avg_join_keys_issued, t.join_keys_issued as f64 / c.m as f64);
                assert_eq!(rep.stats.avg_withdraw_cost, t.withdraw_cost as f64 / c.m as f64);
                // Fresh keys differ from path lengths by exactly one per event.
                assert_eq!(t.join_keys_issued, t.join_cost + t.joins);
                assert_eq!(t.withdraw_keys_issued + t.withdrawals, t.withdraw_cost);
                assert!(epoch.audit().all_passed());
            }
        }
    }
}

#[test]
fn replication_stats_are_in_index_order() {
    let report = run(&config(Policy::Alg2, WithdrawRule::Uniform)).unwrap();
    let idx: Vec<usize> = report.replications.iter().map(|r| r.index).collect();
    assert_eq!(idx, vec![0, 1, 2, 3]);
    let solo = run_replication(&config(Policy::Alg2, WithdrawRule::Uniform), 2, false).unwrap();
    assert_eq!(solo.stats, report.replications[2]);
    assert!(report.final_tree.satisfies_source_coding_bound());
    assert_eq!(report.final_tree.n, 64);
}

#[test]
fn narrow_distribution_respected() {
    let mut c = config(Policy::Alg1, WithdrawRule::Weighted);
    c.prob_dist = ProbDist::Uniform { lo: 0.5, hi: 0.5 };
    let rep = run_replication(&c, 0, false).unwrap();
    assert!(rep.tree.members().all(|m| m.p() == 0.5));
}

#[test]
fn sweep_is_reproducible_and_tables_parse() {
    let configs: Vec<SimulationConfig> = Policy::ALL
        .into_iter()
        .flat_map(|p| {
            [16, 32].map(|n| SimulationConfig {
                n,
                m: 50,
                policy: p,
                replications: 2,
                ..SimulationConfig::default()
            })
        })
        .collect();
    let a: Vec<_> = sweep(&configs, 9).into_iter().map(Result::unwrap).collect();
    let b: Vec<_> = sweep(&configs, 9).into_iter().map(Result::unwrap).collect();
    assert_eq!(a, b);
    for (i, r) in a.iter().enumerate() {
        assert_eq!(r.config.seed, cell_seed(9, i));
    }
    let (join, withdraw) = render_tables(&a, TableMetric::KeysIssued);
    for table in [&join, &withdraw] {
        let mut rd = csv::Reader::from_reader(table.as_bytes());
        assert_eq!(rd.headers().unwrap().len(), 3);
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            for cell in row.iter().skip(1) {
                let (_, frac) = cell.split_once('.').unwrap();
                assert_eq!(frac.len(), 2);
            }
        }
    }
}
