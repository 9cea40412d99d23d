//! `lkhsim` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime error or failed check, 2 usage or
//! configuration error. `LKH_SIM_THREADS` caps the worker pool size.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    build_huffman, entropy_bounds, thm4_l_bound, thm5_l_bound, withdrawal_costs,
    BoundConstants, BoundError, CostReport,
};
use crate::key_tree::{KeyTree, Member, MemberId};
use crate::policies::Policy;
use crate::rekey::KeyEpoch;
use crate::simulator::{
    self, render_tables, run_replication, ProbDist, SimError, SimulationConfig,
    SimulationReport, TableMetric, WithdrawRule,
};

pub const THREADS_ENV: &str = "LKH_SIM_THREADS";

const EXIT_OK: i32 = 0;
const EXIT_FAIL: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "lkhsim", version, about = "Weighted LKH key trees: churn simulation, bounds and audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one churn simulation and write its report.
    Simulate(SimulateArgs),
    /// Run a grid of simulations and emit join/withdrawal tables.
    Sweep(SweepArgs),
    /// Build the Huffman tree of a member set and write it as JSON.
    Huffman(HuffmanArgs),
    /// Evaluate the entropy, depth and cost bounds.
    Bounds(BoundsArgs),
    /// Audit a rekey history for forward and backward security.
    Audit(AuditArgs),
    /// Check the structural invariants of a serialized tree.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct ChurnArgs {
    /// Probability range of member withdrawal probabilities, as `lo:hi`.
    #[arg(long, default_value = "0.1:0.9", value_parser = parse_dist)]
    pub dist: ProbDist,
    #[arg(long, default_value = "weighted")]
    pub withdraw_rule: WithdrawRule,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value = "alg1")]
    pub policy: Policy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub churn: ChurnArgs,
    /// Report destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Also record replication 0's rekey history as JSON lines.
    #[arg(long)]
    pub epoch_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[command(flatten)]
    pub churn: ChurnArgs,
    /// Group sizes (default: 100 and 10000).
    #[arg(long = "n", value_delimiter = ',')]
    pub ns: Vec<usize>,
    /// Churn lengths (default: 100 and 10000).
    #[arg(long = "m", value_delimiter = ',')]
    pub ms: Vec<usize>,
    /// Policies (default: all four).
    #[arg(long = "policy", value_delimiter = ',')]
    pub policies: Vec<Policy>,
    #[arg(long, default_value = "keys-issued")]
    pub metric: TableMetric,
    /// Directory receiving join.csv, withdraw.csv and reports.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct HuffmanArgs {
    /// Comma-separated probabilities; members get ids 0, 1, ...
    #[arg(long, value_delimiter = ',', conflicts_with = "members", required_unless_present = "members")]
    pub probs: Vec<f64>,
    /// JSON array of `{"id": .., "p": ..}` members.
    #[arg(long)]
    pub members: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BoundsArgs {
    /// A cost report or simulation report (JSON); the latter's final tree is used.
    #[arg(long, conflicts_with_all = ["n", "pmax", "pmin", "entropy", "pg"])]
    pub report: Option<PathBuf>,
    #[arg(long, required_unless_present = "report")]
    pub n: Option<usize>,
    #[arg(long, required_unless_present = "report")]
    pub pmax: Option<f64>,
    #[arg(long, required_unless_present = "report")]
    pub pmin: Option<f64>,
    #[arg(long)]
    pub entropy: Option<f64>,
    #[arg(long)]
    pub pg: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub epoch: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub tree: PathBuf,
}

fn parse_dist(s: &str) -> Result<ProbDist, String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    Ok(ProbDist::Uniform { lo, hi })
}

/// A failed command: message plus exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAIL,
            message: message.into(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(command: Command) -> Result<i32, Failure> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Huffman(a) => huffman(a),
        Command::Bounds(a) => bounds(a),
        Command::Audit(a) => audit(a),
        Command::Validate(a) => validate(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_failure(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::runtime(e.to_string()))
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn simulate(a: SimulateArgs) -> Result<i32, Failure> {
    let config = SimulationConfig {
        n: a.n,
        m: a.m,
        policy: a.policy,
        prob_dist: a.churn.dist,
        withdraw_rule: a.churn.withdraw_rule,
        seed: a.seed,
        replications: a.churn.reps,
    };
    config.validate().map_err(SimError::from)?;
    let report = simulator::run(&config)?;
    let text = match a.format {
        Format::Json => with_newline(report.to_json()),
        Format::Csv => report.to_csv(),
    };
    emit(a.out.as_deref(), &text)?;
    if let Some(path) = a.epoch_out.as_deref() {
        let rep = run_replication(&config, 0, true)?;
        let epoch = rep.epoch.expect("epoch requested");
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        epoch
            .write_jsonl(BufWriter::new(file))
            .map_err(|e| io_failure(path, e))?;
    }
    Ok(EXIT_OK)
}

fn sweep(a: SweepArgs) -> Result<i32, Failure> {
    let template = SimulationConfig {
        prob_dist: a.churn.dist,
        withdraw_rule: a.churn.withdraw_rule,
        replications: a.churn.reps,
        ..SimulationConfig::default()
    };
    let ns = if a.ns.is_empty() { vec![100, 10_000] } else { a.ns };
    let ms = if a.ms.is_empty() { vec![100, 10_000] } else { a.ms };
    let policies = if a.policies.is_empty() {
        Policy::ALL.to_vec()
    } else {
        a.policies
    };
    // Same row-major order as the published grid.
    let mut configs = Vec::new();
    for &policy in &policies {
        for &n in &ns {
            for &m in &ms {
                configs.push(SimulationConfig {
                    n,
                    m,
                    policy,
                    ..template.clone()
                });
            }
        }
    }
    for c in &configs {
        c.validate().map_err(SimError::from)?;
    }
    let reports = simulator::sweep(&configs, a.base_seed)
        .into_iter()
        .collect::<Result<Vec<SimulationReport>, _>>()?;
    let (join, withdraw) = render_tables(&reports, a.metric);
    fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
    emit(Some(&a.out_dir.join("join.csv")), &join)?;
    emit(Some(&a.out_dir.join("withdraw.csv")), &withdraw)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    emit(Some(&a.out_dir.join("reports.json")), &with_newline(json))?;
    print!("{join}");
    print!("{withdraw}");
    Ok(EXIT_OK)
}

fn huffman(a: HuffmanArgs) -> Result<i32, Failure> {
    let members: Vec<Member> = match a.members.as_deref() {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => a
            .probs
            .iter()
            .enumerate()
            .map(|(i, &p)| Member::new(MemberId(i as u64), p))
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::usage(e.to_string()))?,
    };
    let tree = build_huffman(&members).map_err(|e| Failure::usage(e.to_string()))?;
    emit(a.out.as_deref(), &with_newline(tree.to_json()))?;
    let report = withdrawal_costs(&tree).map_err(|e| Failure::runtime(e.to_string()))?;
    eprintln!(
        "n = {}, L = {}, l = {}, H = {}",
        report.n, report.expected_cost, report.normalized_cost, report.entropy
    );
    Ok(EXIT_OK)
}

fn load_cost_report(path: &Path) -> Result<CostReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    if let Ok(r) = serde_json::from_str::<CostReport>(&text) {
        return Ok(r);
    }
    serde_json::from_str::<SimulationReport>(&text)
        .map(|r| r.final_tree)
        .map_err(|e| Failure::usage(format!("{}: not a cost or simulation report: {e}", path.display())))
}

fn bound_line(name: &str, value: Result<f64, BoundError>) -> Result<String, Failure> {
    match value {
        Ok(v) => Ok(format!("{name}: {v}")),
        Err(BoundError::Inapplicable(why)) => Ok(format!("{name}: inapplicable ({why})")),
        Err(e @ BoundError::InvalidInput(_)) => Err(Failure::usage(e.to_string())),
    }
}

fn bounds(a: BoundsArgs) -> Result<i32, Failure> {
    let (n, p_max, p_min, entropy, p_g) = match a.report.as_deref() {
        Some(path) => {
            let r = load_cost_report(path)?;
            (r.n, r.p_max, r.p_min, Some(r.entropy), Some(r.total_weight))
        }
        None => (
            a.n.expect("required by clap"),
            a.pmax.expect("required by clap"),
            a.pmin.expect("required by clap"),
            a.entropy,
            a.pg,
        ),
    };
    if let Some(h) = entropy {
        if !(h.is_finite() && h >= 0.0) {
            return Err(Failure::usage(format!("entropy must be finite and ≥ 0, got {h}")));
        }
    }
    let mut lines = Vec::new();
    let (lo, hi) = entropy_bounds(n, p_max, p_min).map_err(|e| Failure::usage(e.to_string()))?;
    lines.push(format!("entropy_bounds: ({lo}, {hi})"));

    let report = p_g.map(|p_g| CostReport {
        n,
        total_weight: p_g,
        p_max,
        p_min,
        expected_cost: f64::NAN,
        normalized_cost: f64::NAN,
        entropy: entropy.unwrap_or(f64::NAN),
    });
    if let Some(r) = &report {
        r.check_coherent().map_err(|e| Failure::usage(e.to_string()))?;
    }
    let c = BoundConstants::new();
    let missing = |what: &str| Err(BoundError::Inapplicable(format!("{what} not given")));
    match entropy {
        Some(h) => lines.push(format!("selcuk_l_bound: {}", c.k1 * h + c.k2)),
        None => lines.push(bound_line("selcuk_l_bound", missing("entropy"))?),
    }
    let needs_both = |f: fn(&CostReport) -> Result<f64, BoundError>| match (&report, entropy) {
        (Some(r), Some(_)) => f(r),
        (None, _) => missing("P_G"),
        (_, None) => missing("entropy"),
    };
    lines.push(bound_line("thm4_l_bound", needs_both(thm4_l_bound))?);
    lines.push(bound_line("thm5_l_bound", needs_both(thm5_l_bound))?);
    emit(None, &(lines.join("\n") + "\n"))?;
    Ok(EXIT_OK)
}

fn audit(a: AuditArgs) -> Result<i32, Failure> {
    let path = a.epoch.as_path();
    let file = File::open(path).map_err(|e| io_failure(path, e))?;
    let epoch = KeyEpoch::read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut failed = false;
    if let Err(e) = epoch.verify_consistency() {
        eprintln!("inconsistent history: {e}");
        failed = true;
    }
    let report = epoch.audit();
    for v in &report.violations {
        eprintln!(
            "{:?} violation: member {} at step {}, node {} version {}",
            v.kind, v.member, v.step, v.node, v.version
        );
    }
    failed |= !report.all_passed();
    let fwd_fail = report.forward.values().filter(|ok| !**ok).count();
    let bwd_fail = report.backward.values().filter(|ok| !**ok).count();
    println!(
        "entries: {}, withdrawals audited: {} ({} failed), joins audited: {} ({} failed)",
        epoch.len(),
        report.forward.len(),
        fwd_fail,
        report.backward.len(),
        bwd_fail
    );
    println!("{}", if failed { "FAIL" } else { "PASS" });
    Ok(if failed { EXIT_FAIL } else { EXIT_OK })
}

fn validate(a: ValidateArgs) -> Result<i32, Failure> {
    let path = a.tree.as_path();
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let tree = KeyTree::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let violations = tree.validate();
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v:?}");
        }
        println!("FAIL: {} violations", violations.len());
        return Ok(EXIT_FAIL);
    }
    if tree.is_empty() {
        println!("ok: empty tree");
        return Ok(EXIT_OK);
    }
    let r = withdrawal_costs(&tree).map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "ok: n = {}, height = {}, L = {}, l = {}, H = {}",
        r.n,
        tree.height().unwrap_or(0),
        r.expected_cost,
        r.normalized_cost,
        r.entropy
    );
    Ok(EXIT_OK)
}
