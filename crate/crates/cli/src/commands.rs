//! Subcommand definitions and their implementations.

use std::collections::HashMap;
use std::fs;
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tierkv_core::compression::{measure_ratio, train_dictionary, Codec, TrainParams};
use tierkv_core::cost_model::{break_even_interval, CostModel, WorkloadProfile};
use tierkv_core::elastic_exec::Executor;
use tierkv_core::evaluator::{
    calculate, evaluate, sweep_cache_ratio, EvalOptions, MeasureParams, SweepPrices,
};
use tierkv_core::mrc::{full_miss_ratio_curve, miss_ratio_curve, stack_distance_histogram};
use tierkv_core::workload::{
    generate, read_trace, replay, KeyDistribution, Pacing, RecordSize, ReplayReport, Trace, TraceOp,
    ValueSource, WorkloadSpec, TRACE_HEADER,
};

use crate::config::{parse_eval_configs, ServerConfig};
use crate::remote::RemoteTarget;
use crate::server;

/// Bad arguments detected after parsing; exits with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "tierkv", version, about = "Tiered key-value store and cost evaluation tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a workload trace.
    Gen(GenArgs),
    /// Replay a trace against an in-process store or a server.
    Replay(ReplayArgs),
    /// Train a compression dictionary from sample values.
    TrainDict(TrainArgs),
    /// Measure configurations and write a cost report.
    Eval(EvalArgs),
    /// Compute the LRU miss-ratio curve of a trace.
    Mrc(MrcArgs),
    /// Break-even access interval between a fast and a slow configuration.
    BreakEven(BreakEvenArgs),
    /// Sweep cache ratios and price each with the two-tier cost formula.
    SweepCr(SweepArgs),
    /// Run the TCP server.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Dist {
    Zipf,
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mix {
    /// 50% reads, 50% updates
    A,
    /// 95% reads, 5% updates
    B,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    pub keys: usize,
    #[arg(long, default_value_t = 100_000)]
    pub ops: usize,
    #[arg(long, value_enum, default_value = "zipf")]
    pub dist: Dist,
    #[arg(long, default_value_t = 0.99)]
    pub theta: f64,
    #[arg(long, value_enum, default_value = "b")]
    pub mix: Mix,
    /// Overrides the mix.
    #[arg(long)]
    pub read_fraction: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub record_size: usize,
    #[arg(long, requires = "record_max")]
    pub record_min: Option<usize>,
    #[arg(long, requires = "record_min")]
    pub record_max: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Draw values from the lines of this file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Rate used for trace timestamps.
    #[arg(long, default_value_t = 10_000.0)]
    pub qps: f64,
    /// Load and run phases in one trace.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub load_out: Option<PathBuf>,
    #[arg(long)]
    pub run_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Store configuration for an in-process replay.
    #[arg(long, conflicts_with = "addr")]
    pub config: Option<PathBuf>,
    /// Replay against a running server instead.
    #[arg(long)]
    pub addr: Option<String>,
    /// max, timed, or qps:<rate>
    #[arg(long, default_value = "max")]
    pub pacing: String,
    #[arg(long, default_value_t = 1)]
    pub clients: usize,
    /// CSV report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A trace (SET values are used) or a file of one sample per line.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 254)]
    pub max_patterns: usize,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_support: f64,
    #[arg(long, default_value_t = 1)]
    pub dict_version: u8,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Configuration blocks (`[id]` followed by `key = value` lines).
    #[arg(long)]
    pub configs: PathBuf,
    #[arg(long)]
    pub load: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Cost report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-tier breakdown CSV for tiered rows.
    #[arg(long)]
    pub tiered_out: Option<PathBuf>,
    /// Workload queries per second (default: the run trace's rate).
    #[arg(long)]
    pub qps: Option<f64>,
    /// Workload data bytes (default: bytes in the load trace).
    #[arg(long)]
    pub data_size: Option<f64>,
    /// Round instance counts up to whole instances.
    #[arg(long)]
    pub ceiling: bool,
    #[arg(long, default_value_t = 3000)]
    pub warmup_ms: u64,
    #[arg(long, default_value_t = 10_000)]
    pub window_ms: u64,
    #[arg(long, default_value_t = 64)]
    pub max_concurrency: usize,
}

#[derive(Debug, Args)]
pub struct MrcArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated cache sizes in entries (default: every size).
    #[arg(long)]
    pub sizes: Option<String>,
}

#[derive(Debug, Args)]
pub struct BreakEvenArgs {
    /// Cost per query/s of the slow configuration.
    #[arg(long)]
    pub cpqps_slow: f64,
    /// Cost per GB of the fast configuration.
    #[arg(long)]
    pub cpgb_fast: f64,
    /// Average record size in bytes.
    #[arg(long)]
    pub record_size: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub load: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Comma-separated cache ratios (default 0.05 to 1.0 in steps of 0.05).
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub pc_cache: f64,
    #[arg(long, default_value_t = 10.0)]
    pub pc_miss: f64,
    #[arg(long, default_value_t = 5.0)]
    pub pc_storage: f64,
    #[arg(long, default_value_t = 20.0)]
    pub sc_cache: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sc_storage: f64,
    /// cr,mr,pc,sc,total CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Configuration file (falls back to $TIERKV_CONFIG).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides server.listen.
    #[arg(long)]
    pub listen: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Gen(a) => gen(a),
        Cmd::Replay(a) => replay_cmd(a),
        Cmd::TrainDict(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Mrc(a) => mrc(a),
        Cmd::BreakEven(a) => break_even(a),
        Cmd::SweepCr(a) => sweep(a),
        Cmd::Serve(a) => serve(a),
    }
}

fn write_trace_file(trace: &Trace, path: &Path) -> Result<()> {
    tierkv_core::workload::write_trace(trace, path).with_context(|| format!("writing {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Trace> {
    read_trace(path).with_context(|| format!("reading trace {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    if a.out.is_none() && a.load_out.is_none() && a.run_out.is_none() {
        return usage("gen needs --out, --load-out or --run-out");
    }
    let read_fraction = a.read_fraction.unwrap_or(match a.mix {
        Mix::A => 0.5,
        Mix::B => 0.95,
    });
    let spec = WorkloadSpec {
        key_count: a.keys,
        record_size: match (a.record_min, a.record_max) {
            (Some(lo), Some(hi)) => RecordSize::Between(lo, hi),
            _ => RecordSize::Fixed(a.record_size),
        },
        distribution: match a.dist {
            Dist::Zipf => KeyDistribution::Zipfian(a.theta),
            Dist::Uniform => KeyDistribution::Uniform,
        },
        read_fraction,
        op_count: a.ops,
        seed: a.seed,
        value_source: a.corpus.map_or(ValueSource::Random, ValueSource::CorpusFile),
        nominal_qps: a.qps,
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    let w = generate(&spec)?;
    if let Some(p) = &a.out {
        write_trace_file(&w.combined(), p)?;
    }
    if let Some(p) = &a.load_out {
        write_trace_file(&w.load, p)?;
    }
    if let Some(p) = &a.run_out {
        write_trace_file(&w.run, p)?;
    }
    log::info!("generated {} load and {} run operations", w.load.len(), w.run.len());
    Ok(())
}

pub fn parse_pacing(s: &str) -> Result<Pacing> {
    match s {
        "max" => Ok(Pacing::MaxThroughput),
        "timed" => Ok(Pacing::Timed),
        _ => match s.strip_prefix("qps:").and_then(|q| q.parse::<f64>().ok()) {
            Some(q) if q > 0.0 => Ok(Pacing::FixedQps(q)),
            _ => usage(format!("bad pacing `{s}`: expected max, timed or qps:<rate>")),
        },
    }
}

fn emit_report(report: &ReplayReport, path: Option<&Path>) -> Result<()> {
    eprintln!("{report}");
    if let Some(p) = path {
        fs::write(p, format!("{}\n{}\n", ReplayReport::CSV_HEADER, report.csv_row()))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let pacing = parse_pacing(&a.pacing)?;
    let trace = load_trace(&a.trace)?;
    let report = match &a.addr {
        Some(addr) => {
            let sock = addr
                .to_socket_addrs()
                .with_context(|| format!("resolving {addr}"))?
                .next()
                .context("address resolved to nothing")?;
            let target = RemoteTarget::connect(sock, a.clients)?;
            replay(&trace, &target, pacing, a.clients)?
        }
        None => {
            let cfg = ServerConfig::resolve(a.config.as_deref())?;
            let store = cfg.build_store()?;
            let _flusher = (store.policy() == tierkv_core::tier_sync::SyncPolicy::WriteBack)
                .then(|| store.spawn_flusher());
            let exec = Executor::start(store, cfg.initial_mode());
            let r = replay(&trace, &exec, pacing, a.clients)?;
            exec.shutdown();
            r
        }
    };
    emit_report(&report, a.report.as_deref())
}

/// SET values of a trace, or the non-empty lines of any other file.
fn read_samples(path: &Path) -> Result<Vec<Vec<u8>>> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if data.starts_with(TRACE_HEADER.as_bytes()) {
        let t = load_trace(path)?;
        return Ok(t
            .records
            .into_iter()
            .filter_map(|r| match r.op {
                TraceOp::Set(v) => Some(v),
                _ => None,
            })
            .collect());
    }
    Ok(data
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(<[u8]>::to_vec)
        .collect())
}

fn train(a: TrainArgs) -> Result<()> {
    let samples = read_samples(&a.samples)?;
    let params = TrainParams {
        max_patterns: a.max_patterns,
        min_pattern_len: a.min_len,
        min_support: a.min_support,
        version: a.dict_version,
    };
    let dict = train_dictionary(&samples, params).map_err(|e| UsageError(e.to_string()))?;
    dict.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let stats = measure_ratio(&Codec::new(Arc::new(dict.clone())), &samples);
    log::info!(
        "{} patterns from {} samples; ratio {:.4}, unmatched {:.3}",
        dict.len(),
        samples.len(),
        stats.ratio(),
        stats.unmatched_fraction()
    );
    Ok(())
}

fn load_bytes(t: &Trace) -> f64 {
    t.records
        .iter()
        .map(|r| match &r.op {
            TraceOp::Set(v) => (r.key.len() + v.len()) as f64,
            _ => 0.0,
        })
        .sum()
}

fn eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.configs).with_context(|| format!("reading {}", a.configs.display()))?;
    let configs = parse_eval_configs(&text)?;
    let workload = tierkv_core::workload::Workload {
        load: load_trace(&a.load)?,
        run: load_trace(&a.run)?,
    };
    let trace_qps = {
        let secs = workload.run.duration().as_secs_f64();
        if secs > 0.0 {
            workload.run.len() as f64 / secs
        } else {
            workload.run.len() as f64
        }
    };
    let n_load = workload.load.len().max(1) as f64;
    let data = a.data_size.unwrap_or_else(|| load_bytes(&workload.load));
    let profile = WorkloadProfile::new(
        a.qps.unwrap_or(trace_qps),
        data,
        (load_bytes(&workload.load) / n_load).max(1.0),
        workload
            .run
            .records
            .iter()
            .filter(|r| r.op == TraceOp::Get)
            .count() as f64
            / workload.run.len().max(1) as f64,
    )
    .map_err(|e| UsageError(e.to_string()))?;
    let opts = EvalOptions {
        measure: MeasureParams {
            warmup: Duration::from_millis(a.warmup_ms),
            window: Duration::from_millis(a.window_ms),
            max_concurrency: a.max_concurrency,
            plateau_gain: 0.05,
        },
        model: if a.ceiling { CostModel::default() } else { CostModel::CONTINUOUS },
    };
    let (report, measurements) = evaluate(&configs, &profile, &workload, opts)?;
    debug_assert_eq!(report, calculate(&measurements, &profile, opts.model));
    fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.tiered_out {
        fs::write(p, report.tiered_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    match &report.winner {
        Some(w) => log::info!("winner: {w}"),
        None => bail!("every configuration failed to measure"),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| UsageError(format!("bad {what} `{x}`")).into()))
        .collect()
}

fn mrc(a: MrcArgs) -> Result<()> {
    let trace = load_trace(&a.trace)?;
    let hist = stack_distance_histogram(trace.keys());
    let curve = match &a.sizes {
        Some(s) => miss_ratio_curve(&hist, &parse_list::<usize>(s, "size")?),
        None => full_miss_ratio_curve(&hist),
    }
    .map_err(|e| UsageError(e.to_string()))?;
    let file = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    curve.write_csv(std::io::BufWriter::new(file))?;
    log::info!(
        "{} accesses, {} distinct keys, cold miss ratio {:.4}",
        curve.total_accesses,
        curve.total_unique_keys,
        curve.cold_miss_ratio()
    );
    Ok(())
}

fn break_even(a: BreakEvenArgs) -> Result<()> {
    let b = break_even_interval(a.cpqps_slow, a.cpgb_fast, a.record_size)
        .map_err(|e| UsageError(e.to_string()))?;
    println!("{:.4}", b.seconds);
    eprintln!("{}", b.mapping_note());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let ratios: Vec<f64> = match &a.ratios {
        Some(s) => parse_list(s, "ratio")?,
        None => (1..=20).map(|i| i as f64 * 0.05).collect(),
    };
    let workload = tierkv_core::workload::Workload {
        load: load_trace(&a.load)?,
        run: load_trace(&a.run)?,
    };
    let prices = SweepPrices {
        pc_cache: a.pc_cache,
        pc_miss: a.pc_miss,
        pc_storage: a.pc_storage,
        sc_cache: a.sc_cache,
        sc_storage: a.sc_storage,
    };
    let report = sweep_cache_ratio(&ratios, &workload, prices)?;
    fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!(
        "recommended cache ratio {:.4}; analytic optimum {:.4} (miss ratio {:.4})",
        report.recommended_cr,
        report.analytic.cr,
        report.analytic.miss_ratio
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServerConfig::resolve(a.config.as_deref())?;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    let handle = server::start(&cfg)?;
    eprintln!("tierkv listening on {}", handle.addr());
    handle.wait();
    Ok(())
}

/// Counts of each trace op, for progress output.
pub fn op_mix(t: &Trace) -> HashMap<&'static str, usize> {
    let mut m = HashMap::new();
    for r in &t.records {
        let k = match r.op {
            TraceOp::Get => "get",
            TraceOp::Set(_) => "set",
            TraceOp::Del => "del",
        };
        *m.entry(k).or_default() += 1;
    }
    m
}
