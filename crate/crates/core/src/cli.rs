//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_config_file, ExperimentConfig, Variant};
use crate::engine::{simulate, SimOptions};
use crate::error::{ConfigError, SimError};
use crate::metrics::{emit, sort_reports, summarize, Format, MetricsReport};
use crate::timing::{
    dlm_draft_cycles, gemm_cycles, pim_preverify_cycles, tlm_on_pim_cycles, tlm_verify_cycles, Roofline,
};
use crate::workload::{write_trace, Workload};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_SIM: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "specsim",
    version,
    about = "Asynchronous NPU+PIM speculative decoding simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one variant with one seed and write its report.
    Run(RunArgs),
    /// Run every variant over a seed list.
    Ablate(MultiArgs),
    /// Run a grid of parameter values. Each PARAM is `key=v1,v2,...`.
    Sweep(SweepArgs),
    /// Mean throughput and energy efficiency of the full design against both
    /// baselines.
    Compare(MultiArgs),
    /// Cycle costs of the timing model at random operating points.
    CostDump(CostDumpArgs),
    /// Write the synthetic workload as an entropy/acceptance trace.
    TraceExport(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// TOML config file; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `workload.accept_slope=0.4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write one JSON line per simulation event.
    #[arg(long, value_name = "PATH")]
    pub event_trace: Option<PathBuf>,
    /// Write periodic snapshots of the drafting and pre-verification
    /// controllers as JSON lines.
    #[arg(long, value_name = "PATH")]
    pub debug_dump: Option<PathBuf>,
    /// Events between debug snapshots.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub debug_every: u64,
}

#[derive(Debug, Args)]
pub struct MultiArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Seed list: `1..5`, `1,4,9` or a single seed.
    #[arg(long, default_value = "1..5")]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "1..5")]
    pub seeds: String,
    /// Restrict the sweep to one variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(value_name = "PARAM", required = true)]
    pub params: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CostDumpArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of operating points.
    #[arg(default_value_t = 50)]
    pub points: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(ConfigError),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Sim(SimError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(msg) => CliError::Io(msg),
            other => CliError::Config(other),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            SimError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Sim(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Sim(_) => EXIT_SIM,
        }
    }
}

/// Expand `a..b` (inclusive), comma lists, or a single seed.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad seed list \"{spec}\""));
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let seeds: Vec<u64> = spec
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn load(common: &CommonArgs, extra: &[String]) -> Result<(ExperimentConfig, Vec<String>), CliError> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = load_config_file(common.config.as_deref(), &overrides)?;
    Ok((cfg, overrides))
}

fn run_one(
    cfg: &ExperimentConfig,
    overrides: &[String],
    opts: &SimOptions,
) -> Result<crate::engine::SimOutcome, CliError> {
    let mut out = simulate(cfg, opts)?;
    out.report.overrides = overrides.join(";");
    Ok(out)
}

fn run_set(jobs: Vec<(ExperimentConfig, Vec<String>)>) -> Result<Vec<MetricsReport>, CliError> {
    let results: Vec<Result<MetricsReport, CliError>> = jobs
        .par_iter()
        .map(|(cfg, ov)| run_one(cfg, ov, &SimOptions::default()).map(|o| o.report))
        .collect();
    let mut reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    sort_reports(&mut reports);
    Ok(reports)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Io(e.to_string()))?);
        text.push('\n');
    }
    write_out(Some(path), &text)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (mut cfg, overrides) = load(&args.common, &[])?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let opts = SimOptions {
        event_trace: args.event_trace.is_some(),
        debug_every: args.debug_dump.as_ref().map(|_| args.debug_every),
    };
    let out = run_one(&cfg, &overrides, &opts)?;
    if let Some(p) = &args.event_trace {
        write_lines(p, &out.events)?;
    }
    if let Some(p) = &args.debug_dump {
        write_lines(p, &out.debug)?;
    }
    let text = emit(&[out.report], args.common.format.unwrap_or(Format::Json))?;
    write_out(args.common.output.as_deref(), &text)
}

fn cmd_ablate(args: &MultiArgs) -> Result<(), CliError> {
    let (cfg, overrides) = load(&args.common, &[])?;
    let seeds = parse_seeds(&args.seeds)?;
    let jobs = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| (cfg.with_variant(v).with_seed(s), overrides.clone()))
        .collect();
    let reports = run_set(jobs)?;
    eprint!("{}", ratio_table(&reports, Variant::OpSync)?);
    let text = emit(&reports, args.common.format.unwrap_or(Format::Csv))?;
    write_out(args.common.output.as_deref(), &text)
}

/// Cartesian product of `key=v1,v2` specs as override lists.
pub fn expand_grid(params: &[String]) -> Result<Vec<Vec<String>>, CliError> {
    let mut grid: Vec<Vec<String>> = vec![Vec::new()];
    for p in params {
        let (key, values) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("sweep parameter \"{p}\" is not key=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Usage(format!("sweep parameter \"{p}\" has no values")));
        }
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(format!("{}={v}", key.trim()));
                    next
                })
            })
            .collect();
    }
    Ok(grid)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let seeds = parse_seeds(&args.seeds)?;
    let variants: Vec<Variant> = match args.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut jobs = Vec::new();
    for point in expand_grid(&args.params)? {
        let (cfg, overrides) = load(&args.common, &point)?;
        for &v in &variants {
            for &s in &seeds {
                jobs.push((cfg.with_variant(v).with_seed(s), overrides.clone()));
            }
        }
    }
    let mut reports = run_set(jobs)?;
    reports.sort_by(|a, b| a.overrides.cmp(&b.overrides));
    let text = emit(&reports, args.common.format.unwrap_or(Format::Csv))?;
    write_out(args.common.output.as_deref(), &text)
}

#[derive(Debug, Serialize)]
struct RatioRow {
    variant: String,
    runs: u64,
    throughput_tokens_per_sec: f64,
    acceptance_rate: f64,
    tokens_per_joule: f64,
    throughput_ratio: f64,
    energy_efficiency_ratio: f64,
    baseline: String,
    /// `approximate` for the synchronous baseline, whose operator placement
    /// is a fixed mapping rather than a searched one.
    placement: &'static str,
}

/// Per-variant means with throughput and energy-efficiency ratios against
/// `baseline`.
fn ratio_rows(reports: &[MetricsReport], baseline: Variant) -> Vec<RatioRow> {
    let summary = summarize(reports);
    let base = summary
        .iter()
        .find(|(v, _)| v == baseline.label())
        .map(|(_, s)| s.clone());
    let tpj = |s: &crate::metrics::Summary| {
        let e = s.energy_per_token();
        if e > 0.0 {
            1e12 / e
        } else {
            0.0
        }
    };
    summary
        .iter()
        .map(|(v, s)| {
            let (thr_ratio, ee_ratio) = match &base {
                Some(b) if b.throughput() > 0.0 && tpj(b) > 0.0 => (s.throughput() / b.throughput(), tpj(s) / tpj(b)),
                _ => (0.0, 0.0),
            };
            RatioRow {
                variant: v.clone(),
                runs: s.runs,
                throughput_tokens_per_sec: s.throughput(),
                acceptance_rate: s.acceptance(),
                tokens_per_joule: tpj(s),
                throughput_ratio: thr_ratio,
                energy_efficiency_ratio: ee_ratio,
                baseline: baseline.label().to_string(),
                placement: if v == Variant::OpSync.label() {
                    "approximate"
                } else {
                    "modeled"
                },
            }
        })
        .collect()
}

fn ratio_table(reports: &[MetricsReport], baseline: Variant) -> Result<String, CliError> {
    to_csv(&ratio_rows(reports, baseline))
}

fn cmd_compare(args: &MultiArgs) -> Result<(), CliError> {
    let (cfg, overrides) = load(&args.common, &[])?;
    let seeds = parse_seeds(&args.seeds)?;
    let jobs = [Variant::GpuOnly, Variant::OpSync, Variant::Full]
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| (cfg.with_variant(v).with_seed(s), overrides.clone()))
        .collect();
    let reports = run_set(jobs)?;
    let mut rows = ratio_rows(&reports, Variant::GpuOnly);
    rows.extend(ratio_rows(&reports, Variant::OpSync));
    let text = match args.common.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&rows)?,
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    write_out(args.common.output.as_deref(), &text)
}

/// One row of `cost-dump`. Cycle columns are in the executing device's clock.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct CostPoint {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub kv: u64,
    pub draft: u64,
    pub npu_gemm_cycles: u64,
    pub pim_gemm_cycles: u64,
    pub dlm_draft_cycles: u64,
    pub tlm_verify_cycles: u64,
    pub tlm_on_pim_cycles: u64,
    pub pim_preverify_cycles: u64,
}

/// Evaluate the timing model at `count` points drawn from `seed`.
pub fn cost_points(cfg: &ExperimentConfig, seed: u64, count: usize) -> Result<Vec<CostPoint>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = &cfg.hardware;
    let model = &cfg.model;
    let npu = Roofline::npu_matrix(hw);
    let pim = Roofline::pim(hw);
    (0..count)
        .map(|_| {
            let m = rng.random_range(1..=64u64);
            let k = rng.random_range(1..=8192u64);
            let n = rng.random_range(1..=8192u64);
            let kv = rng.random_range(0..=2048u64);
            let draft = rng.random_range(1..=8u64);
            Ok(CostPoint {
                m,
                k,
                n,
                kv,
                draft,
                npu_gemm_cycles: gemm_cycles(&npu, m, k, n, false)?.cycles,
                pim_gemm_cycles: gemm_cycles(&pim, m, k, n, true)?.cycles,
                dlm_draft_cycles: dlm_draft_cycles(hw, model, draft, kv)?.cycles,
                tlm_verify_cycles: tlm_verify_cycles(hw, model, m, kv)?.cycles,
                tlm_on_pim_cycles: tlm_on_pim_cycles(hw, model, draft, kv)?.cycles,
                pim_preverify_cycles: pim_preverify_cycles(hw, model, draft, kv)?.cycles,
            })
        })
        .collect()
}

fn cmd_cost_dump(args: &CostDumpArgs) -> Result<(), CliError> {
    let (cfg, _) = load(&args.common, &[])?;
    let rows = cost_points(&cfg, args.seed, args.points)?;
    let text = match args.common.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&rows)?,
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Io(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    write_out(args.common.output.as_deref(), &text)
}

fn cmd_trace_export(args: &CommonArgs) -> Result<(), CliError> {
    if args.format == Some(Format::Json) {
        return Err(CliError::Usage("traces are CSV only".into()));
    }
    let (cfg, _) = load(args, &[])?;
    let mut workload = Workload::from_config(&cfg).map_err(SimError::from)?;
    let records = workload.export_trace(cfg.generation_length);
    let mut buf = Vec::new();
    write_trace(&records, &mut buf).map_err(SimError::from)?;
    write_out(args.output.as_deref(), &String::from_utf8_lossy(&buf))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::CostDump(a) => cmd_cost_dump(a),
        Command::TraceExport(a) => cmd_trace_export(a),
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
