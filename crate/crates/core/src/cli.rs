//! The `proattention` command line.
//!
//! Exit codes: 0 on success, 2 for any input problem (bad flags, unreadable
//! or malformed files, shape mismatches), 3 when an internal invariant such
//! as loss descent is violated.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::{pro_attention, pro_attention_from_weights, AttentionConfig};
use crate::block::{encoder_block, vanilla_encoder_block, BlockParams};
use crate::costmodel::{cost_row, op_count, CostQuery, Mechanism};
use crate::error::{Error, Result};
use crate::estimator::{newton_irls, WeightedPoints};
use crate::io::{read_matrix, read_vector, write_atomic, write_matrix};
use crate::penalty::{Penalty, PenaltyKind, PenaltySpec};
use crate::simlab::{
    default_descent_penalties, descent_curves, outlier_sweep, trajectory_report, DescentSpec, ExperimentReport,
    MixtureSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

/// Environment variable capping worker threads (0 or unset = automatic).
pub const THREADS_ENV: &str = "PROTATTN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "proattention", version, about = "Robust attention via Newton-IRLS")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Base RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Residual floor for IRLS weights.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Number of Newton-IRLS steps K.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Penalty kind: l2, l1, huber, mcp, huber_mcp.
    #[arg(long, global = true)]
    pub penalty: Option<String>,
    /// MCP / Huber-MCP threshold.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Huber / Huber-MCP threshold.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Output file (or directory for `simulate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run robust attention on matrix files.
    Attend(AttendArgs),
    /// Robust estimate of one token from a set of points; writes the trace.
    Estimate(EstimateArgs),
    /// Run a simulation and write CSV/JSON reports into a directory.
    Simulate(SimulateArgs),
    /// Run the encoder block on an input matrix.
    Block(BlockArgs),
    /// Print the analytic operation count of an attention mechanism.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[arg(long = "q")]
    pub q: Option<PathBuf>,
    #[arg(long = "k")]
    pub k: Option<PathBuf>,
    #[arg(long = "v")]
    pub v: PathBuf,
    /// Precomputed attention weights used instead of softmax(QKᵀ).
    #[arg(long, conflicts_with_all = ["q", "k"])]
    pub attention_matrix: Option<PathBuf>,
    /// JSON attention config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// N×D matrix of points.
    #[arg(long)]
    pub points: PathBuf,
    /// Length-N weight vector (uniform when absent).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimKind {
    Outliers,
    Trajectory,
    Descent,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub kind: SimKind,
    /// Comma-separated penalty kinds (outliers and descent).
    #[arg(long, value_delimiter = ',')]
    pub penalties: Option<Vec<String>>,
    /// Fraction of all points that are outliers.
    #[arg(long, default_value_t = 0.45)]
    pub ratio: f64,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    #[arg(long, default_value_t = 100)]
    pub n_clean: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Gradient descent step size for the baseline curve.
    #[arg(long, default_value_t = 0.05)]
    pub eta: f64,
    /// Skip the gradient descent baseline.
    #[arg(long)]
    pub no_gd: bool,
}

#[derive(Debug, Args)]
pub struct BlockArgs {
    #[arg(long)]
    pub x: PathBuf,
    /// Parameter directory (block.json plus matrix files).
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use plain softmax attention instead of the robust estimator.
    #[arg(long)]
    pub vanilla: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// vanilla, pro, kde or rkde.
    pub mechanism: String,
    #[arg(value_name = "N")]
    pub n: u64,
    #[arg(value_name = "D")]
    pub d: u64,
    /// Iteration count (pro and rkde).
    #[arg(value_name = "K")]
    pub k: Option<u64>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_INPUT;
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => EXIT_INVARIANT,
                _ => EXIT_INPUT,
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a nonnegative integer, got {raw:?}")))?;
    if n > 0 {
        // A pool may already exist when run() is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Attend(a) => cmd_attend(g, a),
        Command::Estimate(a) => cmd_estimate(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::Block(a) => cmd_block(g, a),
        Command::Cost(a) => cmd_cost(g, a),
    }
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::invalid("--out is required for this command"))
}

fn load_config(path: Option<&Path>) -> Result<AttentionConfig> {
    let Some(path) = path else {
        return Ok(AttentionConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: AttentionConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn override_penalty(base: Penalty, g: &GlobalArgs) -> Result<Penalty> {
    let mut spec = PenaltySpec::from(base);
    if let Some(kind) = &g.penalty {
        spec = PenaltySpec {
            kind: PenaltyKind::parse(kind)?,
            delta: None,
            gamma: None,
        };
        if base.kind() == spec.kind {
            spec = PenaltySpec::from(base);
        }
    }
    if g.gamma.is_some() {
        spec.gamma = g.gamma;
    }
    if g.delta.is_some() {
        spec.delta = g.delta;
    }
    Penalty::try_from(spec)
}

/// Config file (or defaults) with global flags layered on top.
fn resolve_config(g: &GlobalArgs, path: Option<&Path>) -> Result<AttentionConfig> {
    let mut cfg = load_config(path)?;
    cfg.penalty = override_penalty(cfg.penalty, g)?;
    if let Some(k) = g.steps {
        cfg.steps = k;
    }
    if let Some(eps) = g.eps {
        cfg.eps = eps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_attend(g: &GlobalArgs, a: &AttendArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg = resolve_config(g, a.config.as_deref())?;
    let v = read_matrix(&a.v)?;
    let (result, n, d) = match &a.attention_matrix {
        Some(path) => {
            let am = read_matrix(path)?;
            (pro_attention_from_weights(&am, &v, &cfg)?, v.rows(), v.cols())
        }
        None => {
            let (Some(qp), Some(kp)) = (&a.q, &a.k) else {
                return Err(Error::invalid("attend needs --q and --k, or --attention-matrix"));
            };
            let q = read_matrix(qp)?;
            let k = read_matrix(kp)?;
            (pro_attention(&q, &k, &v, &cfg)?, k.rows(), q.cols())
        }
    };
    let ops = op_count(&CostQuery {
        mechanism: Mechanism::Pro,
        n: n as u64,
        d: d as u64,
        k: cfg.steps as u64,
    });
    eprintln!("N={n} D={d} K={} analytic_ops={ops}", cfg.steps);
    write_matrix(out, &result)
}

fn metadata_lines(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_bytes<T: Serialize>(meta: &BTreeMap<String, String>, rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(metadata_lines(meta).into_bytes());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invariant(format!("csv encoding: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Invariant(format!("csv encoding: {e}")))
}

fn cmd_estimate(g: &GlobalArgs, a: &EstimateArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg = resolve_config(g, a.config.as_deref())?;
    let points = read_matrix(&a.points)?;
    let pts = match &a.weights {
        Some(path) => WeightedPoints::new(points, read_vector(path)?)?,
        None => WeightedPoints::uniform(points),
    };
    let trace = newton_irls(&cfg.penalty, &pts, cfg.steps, cfg.eps, None)?;
    if let Some(step) = trace.first_ascent(1e-9) {
        return Err(Error::Invariant(format!("loss increased at step {step}")));
    }

    let meta = BTreeMap::from([
        ("penalty".to_string(), cfg.penalty.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("eps".to_string(), cfg.eps.to_string()),
        ("points".to_string(), a.points.display().to_string()),
    ]);
    let mut w = csv::Writer::from_writer(metadata_lines(&meta).into_bytes());
    let mut header = vec!["step".to_string(), "loss".to_string()];
    header.extend((0..pts.dim()).map(|i| format!("coord_{i}")));
    let enc = |e: csv::Error| Error::Invariant(format!("csv encoding: {e}"));
    w.write_record(&header).map_err(enc)?;
    for (step, (z, loss)) in trace.iterates.iter().zip(&trace.losses).enumerate() {
        let mut rec = vec![step.to_string(), fmt_f64(*loss)];
        rec.extend(z.iter().map(|x| fmt_f64(*x)));
        w.write_record(&rec).map_err(enc)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("csv encoding: {e}")))?;
    write_atomic(out, &bytes)
}

fn penalties_from(names: Option<&[String]>, defaults: Vec<Penalty>, g: &GlobalArgs) -> Result<Vec<Penalty>> {
    let base: Vec<Penalty> = match (names, &g.penalty) {
        (Some(names), _) => names
            .iter()
            .map(|n| PenaltyKind::parse(n.trim()).map(Penalty::with_defaults))
            .collect::<Result<_>>()?,
        (None, Some(kind)) => vec![Penalty::with_defaults(PenaltyKind::parse(kind)?)],
        (None, None) => defaults,
    };
    base.into_iter()
        .map(|p| {
            let mut spec = PenaltySpec::from(p);
            if g.gamma.is_some() {
                spec.gamma = g.gamma;
            }
            if g.delta.is_some() {
                spec.delta = g.delta;
            }
            Penalty::try_from(spec)
        })
        .collect()
}

fn write_report_json(dir: &Path, name: &str, report: &ExperimentReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Invariant(format!("json encoding: {e}")))?;
    write_atomic(dir.join(format!("{name}.json")), &json)
}

fn cmd_simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let dir = require_out(g)?;
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let eps = g.eps.unwrap_or(crate::penalty::DEFAULT_EPS);
    let seed = g.seed.unwrap_or(0);
    match a.kind {
        SimKind::Outliers => {
            let all = PenaltyKind::ALL.into_iter().map(Penalty::with_defaults).collect();
            let penalties = penalties_from(a.penalties.as_deref(), all, g)?;
            let spec = MixtureSpec {
                n_clean: a.n_clean,
                ..MixtureSpec::default()
            }
            .with_outlier_ratio(a.ratio)?;
            if a.seeds == 0 {
                return Err(Error::invalid("--seeds must be positive"));
            }
            let seeds: Vec<u64> = (seed..seed + a.seeds).collect();
            let report = outlier_sweep(&spec, &seeds, &penalties, g.steps.unwrap_or(10), eps)?;
            let mut meta = report.metadata.clone();
            meta.insert("ratio".into(), a.ratio.to_string());
            write_atomic(dir.join("outliers.csv"), &csv_bytes(&meta, &report.errors)?)?;
            write_report_json(dir, "outliers", &report)?;
            for p in &penalties {
                if let Some(m) = report.median_error(p) {
                    println!("{p}\tmedian_error={m:?}");
                }
            }
        }
        SimKind::Trajectory => {
            let base = Penalty::with_defaults(PenaltyKind::L1);
            let penalty = override_penalty(base, g)?;
            let report = trajectory_report(&penalty, g.steps.unwrap_or(3), eps)?;
            let enc = |e: csv::Error| Error::Invariant(format!("csv encoding: {e}"));
            let mut w = csv::Writer::from_writer(metadata_lines(&report.metadata).into_bytes());
            w.write_record(["row", "step", "loss", "coord_0", "coord_1"]).map_err(enc)?;
            for (row, rec) in report.traces.iter().enumerate() {
                for (step, (z, loss)) in rec.trace.iterates.iter().zip(&rec.trace.losses).enumerate() {
                    w.write_record([
                        row.to_string(),
                        step.to_string(),
                        fmt_f64(*loss),
                        fmt_f64(z[0]),
                        fmt_f64(z[1]),
                    ])
                    .map_err(enc)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Invariant(format!("csv encoding: {e}")))?;
            write_atomic(dir.join("trajectory.csv"), &bytes)?;
            write_report_json(dir, "trajectory", &report)?;
        }
        SimKind::Descent => {
            let penalties = penalties_from(a.penalties.as_deref(), default_descent_penalties(), g)?;
            let spec = DescentSpec {
                batch: a.batch,
                heads: a.heads,
                tokens: a.tokens,
                dim: a.dim,
                steps: g.steps.unwrap_or(8),
                seed,
                eps,
                include_gd: !a.no_gd,
                eta: a.eta,
            };
            let report = descent_curves(&spec, &penalties)?;
            for p in &penalties {
                let curve = report.mean_curve(p, "newton");
                if curve.windows(2).any(|w| w[1] > w[0] + 1e-9 * w[0].abs().max(1.0)) {
                    return Err(Error::Invariant(format!("{p}: mean loss curve increased")));
                }
            }
            write_atomic(dir.join("descent.csv"), &csv_bytes(&report.metadata, &report.curves)?)?;
            write_report_json(dir, "descent", &report)?;
        }
    }
    Ok(())
}

fn cmd_block(g: &GlobalArgs, a: &BlockArgs) -> Result<()> {
    let out = require_out(g)?;
    let cfg = resolve_config(g, a.config.as_deref())?;
    let x = read_matrix(&a.x)?;
    let params = BlockParams::load_dir(&a.params)?;
    let y = if a.vanilla {
        vanilla_encoder_block(&x, &params, cfg.scaled)?
    } else {
        encoder_block(&x, &params, &cfg)?
    };
    write_matrix(out, &y)
}

fn cmd_cost(g: &GlobalArgs, a: &CostArgs) -> Result<()> {
    let mechanism = Mechanism::parse(&a.mechanism)?;
    let k = match (a.k, mechanism.uses_steps()) {
        (Some(k), _) => k,
        (None, false) => 0,
        (None, true) => return Err(Error::invalid(format!("{mechanism} needs an iteration count K"))),
    };
    let q = CostQuery::new(mechanism, a.n, a.d, k)?;
    println!("{}", op_count(&q));
    if let Some(out) = &g.out {
        let row = cost_row(&q, g.seed.unwrap_or(0))?;
        write_atomic(out, &csv_bytes(&BTreeMap::new(), &[row])?)?;
    }
    Ok(())
}
