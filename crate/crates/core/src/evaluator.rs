//! Configuration evaluation: load a workload into a store built from a
//! configuration, measure how fast and how much it can serve, turn the
//! measurements into costs, and pick the cheapest configuration.
//!
//! Measuring and costing are separate steps. [`evaluate`] measures every
//! configuration and then calls [`calculate`], which is a pure function of
//! the stored [`Measurement`]s, so a report can be recomputed (with a
//! different profile or cost model) without re-measuring.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::compression::{measure_ratio, Codec, Dictionary};
use crate::cost_model::{
    classify_workload, optimal_cache_ratio, tiered_cost, CacheRatioOptimum, Classification,
    CostError, CostModel, Headroom, InstanceSpec, TieredCostParams, WorkloadProfile, GB,
};
use crate::elastic_exec::{Executor, Mode};
use crate::hash::fnv1a64;
use crate::kv_core::{charged_bytes, DEFAULT_ENTRY_OVERHEAD};
use crate::mrc::{as_ratio_curve, full_miss_ratio_curve, stack_distance_histogram};
use crate::storage::{BatchOp, LogBackend, SimulatedBackend, StorageBackend};
use crate::tier_sync::{StoreConfig, SyncConfig, SyncPolicy, TieredStore};
use crate::workload::{replay, Pacing, ReplayTarget, Trace, TraceOp, TraceRecord, Workload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("p99 latency {p99_us:.1}us exceeds the SLO even at concurrency 1")]
    NeverMeetsSlo { p99_us: f64 },
    #[error("store error: {0}")]
    Store(String),
    #[error("trace has no operations")]
    EmptyTrace,
    #[error("no configurations to evaluate")]
    NoConfigs,
    #[error("{0}")]
    Cost(#[from] CostError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Simulated {
        read_latency_us: u64,
        write_latency_us: u64,
    },
    /// A log file created under `dir`.
    Log { dir: PathBuf },
}

/// Store knobs of one configuration.
#[derive(Debug, Clone)]
pub struct StoreBundle {
    pub policy: SyncPolicy,
    /// Cache capacity as a fraction of the loaded dataset (tiered policies).
    pub cache_ratio: f64,
    pub shards: usize,
    pub dictionary: Option<Arc<Dictionary>>,
    pub exec_mode: Mode,
    pub backend: BackendSpec,
    pub sync: SyncConfig,
}

impl StoreBundle {
    pub fn memory_only() -> Self {
        Self {
            policy: SyncPolicy::MemoryOnly,
            cache_ratio: 1.0,
            shards: 16,
            dictionary: None,
            exec_mode: Mode::Single,
            backend: BackendSpec::Simulated {
                read_latency_us: 0,
                write_latency_us: 0,
            },
            sync: SyncConfig::new(SyncPolicy::MemoryOnly),
        }
    }

    pub fn tiered(policy: SyncPolicy, cache_ratio: f64) -> Self {
        Self {
            policy,
            cache_ratio,
            sync: SyncConfig::new(policy),
            ..Self::memory_only()
        }
    }
}

/// Declared price and ceilings of the storage tier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageTierSpec {
    pub cost: f64,
    pub capacity_bytes: f64,
    pub max_qps: f64,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub config_id: String,
    pub store: StoreBundle,
    pub instance: InstanceSpec,
    /// Required for tiered policies.
    pub storage_tier: Option<StorageTierSpec>,
    pub slo_p99_us: f64,
    pub headroom: Headroom,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(format!("{}: {m}", self.config_id)));
        if !(self.slo_p99_us > 0.0) {
            return bad("slo_p99 must be positive");
        }
        if self.store.policy != SyncPolicy::MemoryOnly {
            if self.storage_tier.is_none() {
                return bad("tiered policy needs a storage tier");
            }
            if !(self.store.cache_ratio > 0.0 && self.store.cache_ratio <= 1.0) {
                return bad("cache_ratio must be in (0, 1]");
            }
        }
        if !self.store.shards.is_power_of_two() {
            return bad("shards must be a power of two");
        }
        Ok(())
    }

    pub fn is_tiered(&self) -> bool {
        self.store.policy != SyncPolicy::MemoryOnly
    }
}

/// Ramp and window settings for throughput measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureParams {
    pub warmup: Duration,
    pub window: Duration,
    pub max_concurrency: usize,
    /// Stop ramping when throughput improves by less than this fraction.
    pub plateau_gain: f64,
}

impl Default for MeasureParams {
    fn default() -> Self {
        Self {
            warmup: Duration::from_secs(3),
            window: Duration::from_secs(10),
            max_concurrency: 64,
            plateau_gain: 0.05,
        }
    }
}

impl MeasureParams {
    pub fn quick() -> Self {
        Self {
            warmup: Duration::from_millis(50),
            window: Duration::from_millis(250),
            max_concurrency: 8,
            plateau_gain: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampStep {
    pub concurrency: usize,
    pub qps: f64,
    pub p99_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfMeasurement {
    /// Best sustained throughput meeting the SLO, times the perf headroom.
    pub max_perf: f64,
    pub raw_max_perf: f64,
    pub p99_us: f64,
    pub concurrency: usize,
    pub steps: Vec<RampStep>,
}

struct WindowResult {
    qps: f64,
    p99_us: f64,
    latency_ns: u64,
}

/// Drives `clients` closed-loop sessions cycling over their share of the
/// trace; counts completions inside the steady window.
fn closed_loop<T: ReplayTarget + ?Sized>(
    target: &T,
    trace: &Trace,
    clients: usize,
    warmup: Duration,
    window: Duration,
) -> Result<WindowResult, EvalError> {
    let mut lanes: Vec<Vec<&TraceRecord>> = vec![Vec::new(); clients];
    for r in &trace.records {
        lanes[(fnv1a64(r.key.as_bytes()) % clients as u64) as usize].push(r);
    }
    let start = Instant::now();
    let window_start = warmup;
    let window_end = warmup + window;
    let stop = AtomicBool::new(false);
    let busy_ns = AtomicU64::new(0);
    let results: Vec<Result<(u64, Vec<f64>), EvalError>> = thread::scope(|s| {
        let handles: Vec<_> = lanes
            .iter()
            .enumerate()
            .map(|(session, lane)| {
                let stop = &stop;
                let busy_ns = &busy_ns;
                s.spawn(move || {
                    let mut done = 0u64;
                    let mut lat = Vec::new();
                    if lane.is_empty() {
                        return Ok((0, lat));
                    }
                    let mut i = 0;
                    while !stop.load(Ordering::Relaxed) {
                        let t = Instant::now();
                        target
                            .execute(session as u64, lane[i])
                            .map_err(|e| EvalError::Store(e.to_string()))?;
                        let took = t.elapsed();
                        let at = start.elapsed();
                        if at >= window_end {
                            stop.store(true, Ordering::Relaxed);
                            break;
                        }
                        if at >= window_start {
                            done += 1;
                            lat.push(took.as_secs_f64() * 1e6);
                            busy_ns.fetch_add(took.as_nanos() as u64, Ordering::Relaxed);
                        }
                        i = (i + 1) % lane.len();
                    }
                    Ok((done, lat))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client panicked")).collect()
    });
    let mut ops = 0;
    let mut lat = Vec::new();
    for r in results {
        let (d, l) = r?;
        ops += d;
        lat.extend(l);
    }
    lat.sort_by(f64::total_cmp);
    Ok(WindowResult {
        qps: ops as f64 / window.as_secs_f64(),
        p99_us: crate::workload::percentile(&lat, 0.99),
        latency_ns: busy_ns.load(Ordering::Relaxed),
    })
}

/// Ramps client concurrency 1, 2, 4, ... replaying `run` and returns the
/// best throughput whose p99 meets `slo_p99_us`.
pub fn measure_max_perf<T: ReplayTarget + ?Sized>(
    target: &T,
    run: &Trace,
    slo_p99_us: f64,
    perf_headroom: f64,
    params: MeasureParams,
) -> Result<PerfMeasurement, EvalError> {
    Ok(ramp(target, run, slo_p99_us, perf_headroom, params)?.0)
}

fn ramp<T: ReplayTarget + ?Sized>(
    target: &T,
    run: &Trace,
    slo_p99_us: f64,
    perf_headroom: f64,
    params: MeasureParams,
) -> Result<(PerfMeasurement, u64), EvalError> {
    if run.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let mut steps = Vec::new();
    let mut best: Option<RampStep> = None;
    let mut busy_ns = 0;
    let mut c = 1;
    while c <= params.max_concurrency.max(1) {
        let w = closed_loop(target, run, c, params.warmup, params.window)?;
        busy_ns += w.latency_ns;
        let step = RampStep {
            concurrency: c,
            qps: w.qps,
            p99_us: w.p99_us,
        };
        steps.push(step);
        log::debug!("concurrency {c}: {:.0} qps, p99 {:.1}us", w.qps, w.p99_us);
        if w.p99_us > slo_p99_us {
            if best.is_none() {
                return Err(EvalError::NeverMeetsSlo { p99_us: w.p99_us });
            }
            break;
        }
        let prev = best.map_or(0.0, |b| b.qps);
        if best.is_none_or(|b| step.qps > b.qps) {
            best = Some(step);
        }
        if prev > 0.0 && step.qps < prev * (1.0 + params.plateau_gain) {
            break;
        }
        c *= 2;
    }
    let best = best.expect("at least one step met the SLO");
    Ok((
        PerfMeasurement {
            max_perf: best.qps * perf_headroom,
            raw_max_perf: best.qps,
            p99_us: best.p99_us,
            concurrency: best.concurrency,
            steps,
        },
        busy_ns,
    ))
}

/// Raw workload bytes that fit in `budget` bytes of cache memory, charging
/// each record its stored (possibly compressed) size plus `overhead`.
pub fn measure_max_space<I>(records: I, budget: u64, overhead: usize, codec: Option<&Codec>) -> u64
where
    I: IntoIterator<Item = (Vec<u8>, Vec<u8>)>,
{
    let mut used = 0u64;
    let mut raw = 0u64;
    for (k, v) in records {
        let stored = match codec {
            Some(c) => c.compress(&v).bytes.len(),
            None => v.len(),
        };
        let charge = charged_bytes(k.len(), stored, overhead) as u64;
        if used + charge > budget {
            break;
        }
        used += charge;
        raw += (k.len() + v.len()) as u64;
    }
    raw
}

/// Endless records shaped like the load phase: its values in turn under
/// fresh keys of the same length.
pub fn synthetic_records(load: &Trace) -> impl Iterator<Item = (Vec<u8>, Vec<u8>)> + '_ {
    let values: Vec<&[u8]> = load
        .records
        .iter()
        .filter_map(|r| match &r.op {
            TraceOp::Set(v) => Some(v.as_slice()),
            _ => None,
        })
        .collect();
    let key_len = load.records.first().map_or(12, |r| r.key.len());
    (0u64..).map_while(move |i| {
        let v = values.get(i as usize % values.len().max(1))?;
        let mut k = format!("{i:0key_len$}").into_bytes();
        k.truncate(key_len.max(1));
        Some((k, v.to_vec()))
    })
}

/// Everything measured for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub config_id: String,
    pub instance: InstanceSpec,
    pub storage_tier: Option<StorageTierSpec>,
    pub replica_factor: f64,
    pub cache_ratio: Option<f64>,
    pub outcome: Result<MeasuredValues, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredValues {
    pub max_perf: f64,
    pub max_space: f64,
    pub p99_us: f64,
    /// Tiered only: measured miss ratio and the share of service time
    /// spent on storage fetches.
    pub miss_ratio: f64,
    pub miss_time_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCosts {
    pub max_perf: f64,
    pub max_space: f64,
    pub cpqps: f64,
    pub cpgb: f64,
    pub pc: f64,
    pub sc: f64,
    pub total: f64,
    pub class: Classification,
    pub tiered: Option<TieredCostParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub config_id: String,
    pub outcome: Result<RowCosts, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub winner: Option<String>,
}

impl CostReport {
    pub const CSV_HEADER: &'static str =
        "config_id,max_perf_qps,max_space_bytes,cpqps,cpgb,pc,sc,total_cost,class,winner_flag";

    pub fn row(&self, id: &str) -> Option<&RowCosts> {
        self.rows
            .iter()
            .find(|r| r.config_id == id)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let win = (self.winner.as_deref() == Some(r.config_id.as_str())) as u8;
            match &r.outcome {
                Ok(c) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.config_id,
                    c.max_perf,
                    c.max_space,
                    c.cpqps,
                    c.cpgb,
                    c.pc,
                    c.sc,
                    c.total,
                    c.class,
                    win
                ),
                Err(_) => writeln!(out, "{},,,,,,,,failed,0", r.config_id),
            }
            .expect("writing to a String");
        }
        out
    }

    /// Extra columns for tiered rows: cache ratio, miss ratio and the
    /// per-tier terms of the two-tier formula.
    pub fn tiered_csv(&self) -> String {
        let mut out = String::from(
            "config_id,cr,mr,pc_cache,pc_miss,pc_storage,sc_cache,sc_storage,cache_tier_cost,storage_tier_cost\n",
        );
        for r in &self.rows {
            if let Ok(RowCosts { tiered: Some(p), .. }) = &r.outcome {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.config_id,
                    p.cr,
                    p.mr,
                    p.pc_cache,
                    p.pc_miss,
                    p.pc_storage,
                    p.sc_cache,
                    p.sc_storage,
                    p.cache_tier_cost(),
                    p.storage_tier_cost()
                )
                .expect("writing to a String");
            }
        }
        out
    }
}

/// Costs one measured configuration.
///
/// Single-tier rows follow `max(PC, SC)` under `model`. Tiered rows use the
/// two-tier formula with continuous costs: the cache-tier throughput cost
/// is split between hits and misses by the measured miss-time share, and
/// the cache tier's space cost is multiplied by the replica factor.
pub fn cost_row(
    m: &Measurement,
    v: &MeasuredValues,
    profile: &WorkloadProfile,
    model: CostModel,
) -> Result<RowCosts, CostError> {
    let cost = m.instance.cost;
    let cpqps = cost / v.max_perf;
    let cpgb = cost / (v.max_space / GB);
    match (m.storage_tier, m.cache_ratio) {
        (Some(st), Some(cr)) => {
            let cache_perf = cost * profile.qps / v.max_perf;
            let share = v.miss_time_share.clamp(0.0, 1.0);
            let pc_miss = if v.miss_ratio > 0.0 {
                cache_perf * share / v.miss_ratio
            } else {
                0.0
            };
            let params = TieredCostParams {
                pc_cache: cache_perf * (1.0 - share),
                pc_miss,
                pc_storage: st.cost * profile.qps / st.max_qps,
                sc_cache: cost * profile.data_size / v.max_space * m.replica_factor,
                sc_storage: st.cost * profile.data_size / st.capacity_bytes,
                cr,
                mr: v.miss_ratio,
            };
            params.validate()?;
            let pc = params.cache_tier_performance() + params.storage_tier_performance();
            let sc = params.cache_tier_space() + params.sc_storage;
            Ok(RowCosts {
                max_perf: v.max_perf,
                max_space: v.max_space,
                cpqps,
                cpgb,
                pc,
                sc,
                total: tiered_cost(&params),
                class: classify_workload(pc, sc),
                tiered: Some(params),
            })
        }
        _ => {
            let pc = cost * instances(model, profile.qps, v.max_perf);
            let sc = cost * instances(model, profile.data_size, v.max_space);
            Ok(RowCosts {
                max_perf: v.max_perf,
                max_space: v.max_space,
                cpqps,
                cpgb,
                pc,
                sc,
                total: pc.max(sc),
                class: classify_workload(pc, sc),
                tiered: None,
            })
        }
    }
}

fn instances(model: CostModel, demand: f64, capacity: f64) -> f64 {
    if model.ceiling {
        (demand / capacity).ceil()
    } else {
        demand / capacity
    }
}

/// Lowest total wins; ties go to the better balanced row, then list order.
/// Over single-tier rows this is `select_optimal_config`.
fn pick_winner(rows: &[CostRow]) -> Option<String> {
    let mut best: Option<(&str, f64, f64)> = None;
    for r in rows {
        let Ok(c) = &r.outcome else { continue };
        let gap = (c.pc - c.sc).abs();
        let better = match best {
            None => true,
            Some((_, t, g)) => c.total < t || (c.total == t && gap < g),
        };
        if better {
            best = Some((&r.config_id, c.total, gap));
        }
    }
    best.map(|(id, _, _)| id.to_string())
}

/// Costs stored measurements. Pure: the same inputs give the same report.
pub fn calculate(measurements: &[Measurement], profile: &WorkloadProfile, model: CostModel) -> CostReport {
    let rows: Vec<CostRow> = measurements
        .iter()
        .map(|m| CostRow {
            config_id: m.config_id.clone(),
            outcome: match &m.outcome {
                Ok(v) => cost_row(m, v, profile, model).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            },
        })
        .collect();
    let winner = pick_winner(&rows);
    CostReport { rows, winner }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub measure: MeasureParams,
    pub model: CostModel,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            measure: MeasureParams::default(),
            model: CostModel::CONTINUOUS,
        }
    }
}

fn load_values(load: &Trace) -> Vec<(Vec<u8>, Vec<u8>)> {
    load.records
        .iter()
        .filter_map(|r| match &r.op {
            TraceOp::Set(v) => Some((r.key.clone().into_bytes(), v.clone())),
            _ => None,
        })
        .collect()
}

fn build_backend(spec: &BackendSpec, config_id: &str) -> Result<Arc<dyn StorageBackend>, EvalError> {
    match spec {
        BackendSpec::Simulated {
            read_latency_us,
            write_latency_us,
        } => {
            let b = SimulatedBackend::new();
            b.set_latency(*read_latency_us, *write_latency_us);
            Ok(Arc::new(b))
        }
        BackendSpec::Log { dir } => {
            let path = dir.join(format!("{config_id}.log"));
            let _ = std::fs::remove_file(&path);
            LogBackend::open(&path)
                .map(|b| Arc::new(b) as Arc<dyn StorageBackend>)
                .map_err(|e| EvalError::Store(e.to_string()))
        }
    }
}

/// A store built from `config` with the load phase applied: tiered stores
/// get it in storage (cold cache), memory-only stores in the cache.
pub fn build_loaded_store(config: &EvalConfig, load: &Trace) -> Result<Arc<TieredStore>, EvalError> {
    config.validate()?;
    let data = load_values(load);
    let b = &config.store;
    let (capacity, storage) = if config.is_tiered() {
        let dataset: usize = data
            .iter()
            .map(|(k, v)| charged_bytes(k.len(), v.len(), DEFAULT_ENTRY_OVERHEAD))
            .sum();
        let backend = build_backend(&b.backend, &config.config_id)?;
        for chunk in data.chunks(1024) {
            let ops: Vec<BatchOp> = chunk.iter().map(|(k, v)| BatchOp::put(k.clone(), v.clone())).collect();
            backend.write_batch(&ops).map_err(|e| EvalError::Store(e.to_string()))?;
        }
        (((b.cache_ratio * dataset as f64).ceil() as usize).max(b.shards), Some(backend))
    } else {
        (config.instance.memory as usize, None)
    };
    let mut sc = StoreConfig::new(capacity, b.policy).with_shards(b.shards);
    sc.sync = SyncConfig {
        policy: b.policy,
        ..b.sync.clone()
    };
    let store = Arc::new(TieredStore::new(sc, storage));
    if let Some(dict) = &b.dictionary {
        let values: Vec<Vec<u8>> = data.iter().take(1000).map(|(_, v)| v.clone()).collect();
        let baseline = measure_ratio(&Codec::new(dict.clone()), &values).ratio();
        store.install_dictionary(dict.clone(), baseline);
    }
    if !config.is_tiered() {
        for (k, v) in &data {
            store.set(k, v).map_err(|e| EvalError::Store(e.to_string()))?;
        }
    }
    Ok(store)
}

/// Measures one configuration.
pub fn measure_config(config: &EvalConfig, workload: &Workload, params: MeasureParams) -> Measurement {
    let outcome = (|| -> Result<MeasuredValues, EvalError> {
        let store = build_loaded_store(config, &workload.load)?;
        let _flusher = (store.policy() == SyncPolicy::WriteBack).then(|| store.spawn_flusher());
        let exec = Executor::start(store.clone(), config.store.exec_mode);
        let before = store.stats();
        let (perf, busy_ns) = ramp(
            &exec,
            &workload.run,
            config.slo_p99_us,
            config.headroom.perf,
            params,
        )?;
        let after = store.stats();
        exec.shutdown();

        let hits = after.sync.hits - before.sync.hits;
        let misses = after.sync.misses - before.sync.misses;
        let miss_ratio = if hits + misses == 0 {
            0.0
        } else {
            misses as f64 / (hits + misses) as f64
        };
        let penalty = (after.sync.miss_penalty_ns - before.sync.miss_penalty_ns) as f64;
        let miss_time_share = if busy_ns == 0 {
            0.0
        } else {
            (penalty / busy_ns as f64).min(1.0)
        };

        let codec = config.store.dictionary.clone().map(Codec::new);
        let budget = (config.instance.memory as f64 * config.headroom.space) as u64;
        let max_space = measure_max_space(
            synthetic_records(&workload.load),
            budget,
            DEFAULT_ENTRY_OVERHEAD,
            codec.as_ref(),
        ) as f64;
        if max_space <= 0.0 {
            return Err(EvalError::InvalidConfig(format!(
                "{}: instance memory holds no records",
                config.config_id
            )));
        }
        Ok(MeasuredValues {
            max_perf: perf.max_perf,
            max_space,
            p99_us: perf.p99_us,
            miss_ratio: if config.is_tiered() { miss_ratio } else { 0.0 },
            miss_time_share: if config.is_tiered() { miss_time_share } else { 0.0 },
        })
    })();
    if let Err(e) = &outcome {
        log::warn!("{}: measurement failed: {e}", config.config_id);
    }
    Measurement {
        config_id: config.config_id.clone(),
        instance: config.instance,
        storage_tier: config.storage_tier,
        replica_factor: if config.is_tiered() {
            config.store.sync.replica_factor
        } else {
            1.0
        },
        cache_ratio: config.is_tiered().then_some(config.store.cache_ratio),
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Measures every configuration in turn, then costs them.
pub fn evaluate(
    configs: &[EvalConfig],
    profile: &WorkloadProfile,
    workload: &Workload,
    opts: EvalOptions,
) -> Result<(CostReport, Vec<Measurement>), EvalError> {
    if configs.is_empty() {
        return Err(EvalError::NoConfigs);
    }
    let measurements: Vec<Measurement> = configs
        .iter()
        .map(|c| {
            log::info!("measuring {}", c.config_id);
            measure_config(c, workload, opts.measure)
        })
        .collect();
    Ok((calculate(&measurements, profile, opts.model), measurements))
}

/// Fixed per-tier prices for a cache-ratio sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPrices {
    pub pc_cache: f64,
    pub pc_miss: f64,
    pub pc_storage: f64,
    pub sc_cache: f64,
    pub sc_storage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub cr: f64,
    pub mr: f64,
    pub pc: f64,
    pub sc: f64,
    pub total: f64,
    pub params: TieredCostParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub recommended_cr: f64,
    /// Optimum of the cache-tier cost on the miss-ratio curve computed from
    /// the same trace.
    pub analytic: CacheRatioOptimum,
}

impl SweepReport {
    /// `cr,mr,pc,sc,total` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cr,mr,pc,sc,total\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.cr, r.mr, r.pc, r.sc, r.total).expect("writing to a String");
        }
        out
    }
}

/// Replays the run phase against a cold single-shard write-through store
/// whose cache holds `cr` of the dataset, for each ratio in turn, and
/// prices each result with the two-tier formula.
pub fn sweep_cache_ratio(
    ratios: &[f64],
    workload: &Workload,
    prices: SweepPrices,
) -> Result<SweepReport, EvalError> {
    if workload.run.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let data = load_values(&workload.load);
    if data.is_empty() {
        return Err(EvalError::InvalidConfig("load phase is empty".into()));
    }
    let charges: Vec<usize> = data
        .iter()
        .map(|(k, v)| charged_bytes(k.len(), v.len(), DEFAULT_ENTRY_OVERHEAD))
        .collect();
    let dataset: usize = charges.iter().sum();
    let avg_charge = dataset as f64 / charges.len() as f64;

    let mut rows = Vec::with_capacity(ratios.len());
    for &cr in ratios {
        if !(0.0..=1.0).contains(&cr) {
            return Err(EvalError::InvalidConfig(format!("cache ratio {cr} outside [0, 1]")));
        }
        let backend = Arc::new(SimulatedBackend::new());
        backend.preload(data.iter().cloned());
        let entries = (cr * charges.len() as f64 + 1e-9).floor();
        let capacity = (entries * avg_charge).round() as usize;
        let store = TieredStore::new(
            StoreConfig::new(capacity, SyncPolicy::WriteThrough).with_shards(1),
            Some(backend as Arc<dyn StorageBackend>),
        );
        let rep = replay(&workload.run, &store, Pacing::MaxThroughput, 1)
            .map_err(|e| EvalError::Store(e.to_string()))?;
        let mr = rep.miss_ratio();
        let params = TieredCostParams {
            pc_cache: prices.pc_cache,
            pc_miss: prices.pc_miss,
            pc_storage: prices.pc_storage,
            sc_cache: prices.sc_cache,
            sc_storage: prices.sc_storage,
            cr,
            mr,
        };
        rows.push(SweepRow {
            cr,
            mr,
            pc: params.cache_tier_performance() + params.storage_tier_performance(),
            sc: params.cache_tier_space() + params.sc_storage,
            total: tiered_cost(&params),
            params,
        });
    }
    let recommended_cr = rows
        .iter()
        .min_by(|a, b| a.total.total_cmp(&b.total))
        .map_or(0.0, |r| r.cr);

    let curve = full_miss_ratio_curve(&stack_distance_histogram(workload.run.keys()))
        .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    let f = as_ratio_curve(curve, dataset as f64, avg_charge);
    let analytic = optimal_cache_ratio(&f, prices.pc_cache, prices.pc_miss, prices.sc_cache)?;
    Ok(SweepReport {
        rows,
        recommended_cr,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::{select_optimal_config, ConfigCost};
    use crate::workload::{generate, OpOutcome, TargetCounters, WorkloadError, WorkloadSpec};

    struct FixedService(Duration);

    impl ReplayTarget for FixedService {
        fn execute(&self, _s: u64, _r: &TraceRecord) -> Result<OpOutcome, WorkloadError> {
            thread::sleep(self.0);
            Ok(OpOutcome::Ok)
        }

        fn counters(&self) -> TargetCounters {
            TargetCounters::default()
        }
    }

    fn small_run() -> Trace {
        generate(&WorkloadSpec::workload_b(256, 2000, 5)).unwrap().run
    }

    #[test]
    fn closed_loop_stub_follows_littles_law() {
        let params = MeasureParams {
            warmup: Duration::from_millis(20),
            window: Duration::from_millis(400),
            max_concurrency: 4,
            plateau_gain: 0.05,
        };
        let t = Duration::from_millis(4);
        let m = measure_max_perf(&FixedService(t), &small_run(), 1e9, 1.0, params).unwrap();
        assert_eq!(m.concurrency, 4);
        let expected = 4.0 / t.as_secs_f64();
        assert!((m.max_perf - expected).abs() / expected < 0.1, "{}", m.max_perf);
    }

    #[test]
    fn unreachable_slo() {
        let r = measure_max_perf(
            &FixedService(Duration::from_micros(50)),
            &small_run(),
            0.001,
            1.0,
            MeasureParams::quick(),
        );
        assert!(matches!(r, Err(EvalError::NeverMeetsSlo { .. })));
    }

    #[test]
    fn max_space_arithmetic() {
        let budget = 1u64 << 30;
        // 1 KiB records: 12-byte key + 1012-byte value
        let records = (0u64..).map(|i| (format!("{i:012}").into_bytes(), vec![b'x'; 1012]));
        let got = measure_max_space(records, budget, 64, None);
        assert_eq!(got, (budget / 1088) * 1024);
        assert_eq!(measure_max_space(std::iter::empty(), budget, 64, None), 0);
    }

    #[test]
    fn compression_raises_max_space() {
        let corpus = crate::workload::template_corpus(500, 1);
        let dict = crate::compression::train_dictionary(&corpus, Default::default()).unwrap();
        let codec = Codec::new(Arc::new(dict));
        let recs = || corpus.iter().cycle().enumerate().map(|(i, v)| (format!("{i:012}").into_bytes(), v.clone()));
        let raw = measure_max_space(recs(), 1 << 20, 64, None);
        let packed = measure_max_space(recs(), 1 << 20, 64, Some(&codec));
        assert!(packed > raw, "{packed} <= {raw}");
    }

    fn measured(id: &str, perf: f64, space: f64) -> Measurement {
        Measurement {
            config_id: id.into(),
            instance: InstanceSpec::new(10.0, 1, 1 << 30).unwrap(),
            storage_tier: None,
            replica_factor: 1.0,
            cache_ratio: None,
            outcome: Ok(MeasuredValues {
                max_perf: perf,
                max_space: space,
                p99_us: 1.0,
                miss_ratio: 0.0,
                miss_time_share: 0.0,
            }),
        }
    }

    fn profile() -> WorkloadProfile {
        WorkloadProfile::new(50_000.0, 200.0 * GB, 100.0, 0.9).unwrap()
    }

    #[test]
    fn report_is_consistent_and_deterministic() {
        let ms = vec![
            measured("a", 10_000.0, 8.0 * GB),
            measured("b", 20_000.0, 16.0 * GB),
            measured("c", 40_000.0, 4.0 * GB),
            Measurement {
                outcome: Err("boom".into()),
                ..measured("d", 1.0, 1.0)
            },
        ];
        for model in [CostModel::CONTINUOUS, CostModel::default()] {
            let r = calculate(&ms, &profile(), model);
            assert_eq!(r, calculate(&ms, &profile(), model));
            assert_eq!(r.winner.as_deref(), Some("b"));
            let mut costs = Vec::new();
            for row in &r.rows {
                let Ok(c) = &row.outcome else { continue };
                assert_eq!(c.total, c.pc.max(c.sc));
                assert_eq!(c.cpqps, 10.0 / c.max_perf);
                assert_eq!(c.cpgb, 10.0 / (c.max_space / GB));
                costs.push(ConfigCost::new(row.config_id.clone(), c.pc, c.sc));
            }
            assert_eq!(
                select_optimal_config(&costs).unwrap().config_id,
                r.winner.clone().unwrap()
            );
        }
        let csv = calculate(&ms, &profile(), CostModel::CONTINUOUS).to_csv();
        assert!(csv.starts_with(CostReport::CSV_HEADER));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("d,,,,,,,,failed,0"));
    }

    #[test]
    fn dominated_config_never_wins() {
        let ms = vec![measured("weak", 1000.0, 1.0 * GB), measured("strong", 2000.0, 2.0 * GB)];
        assert_eq!(calculate(&ms, &profile(), CostModel::CONTINUOUS).winner.as_deref(), Some("strong"));
        let one = vec![measured("only", 1000.0, 1.0 * GB)];
        assert_eq!(calculate(&one, &profile(), CostModel::CONTINUOUS).winner.as_deref(), Some("only"));
    }

    #[test]
    fn tiered_rows_use_two_tier_formula() {
        let mut m = measured("wb", 10_000.0, 8.0 * GB);
        m.storage_tier = Some(StorageTierSpec {
            cost: 2.0,
            capacity_bytes: 40.0 * GB,
            max_qps: 5_000.0,
        });
        m.cache_ratio = Some(0.25);
        m.replica_factor = 2.0;
        if let Ok(v) = &mut m.outcome {
            v.miss_ratio = 0.1;
            v.miss_time_share = 0.2;
        }
        let r = calculate(&[m], &profile(), CostModel::CONTINUOUS);
        let c = r.row("wb").unwrap();
        let p = c.tiered.unwrap();
        // independent recomputation
        let cache_perf = 10.0 * 50_000.0 / 10_000.0;
        assert!((p.pc_cache - 0.8 * cache_perf).abs() < 1e-9);
        assert!((p.pc_miss * 0.1 - 0.2 * cache_perf).abs() < 1e-9);
        assert!((p.sc_cache - 10.0 * 200.0 / 8.0 * 2.0).abs() < 1e-9);
        let expect = (cache_perf).max(p.sc_cache * 0.25) + (2.0 * 10.0 * 0.1f64).max(2.0 * 200.0 / 40.0);
        assert!((c.total - expect).abs() < 1e-9);
        assert!(r.tiered_csv().lines().count() == 2);
    }

    #[test]
    fn sweep_full_cache_gives_cold_miss_rate() {
        let mut spec = WorkloadSpec::workload_b(200, 3000, 2);
        spec.read_fraction = 1.0;
        let w = generate(&spec).unwrap();
        let prices = SweepPrices {
            pc_cache: 1.0,
            pc_miss: 10.0,
            pc_storage: 5.0,
            sc_cache: 20.0,
            sc_storage: 1.0,
        };
        let s = sweep_cache_ratio(&[0.25, 0.5, 1.0], &w, prices).unwrap();
        let unique = w.run.keys().collect::<std::collections::HashSet<_>>().len();
        assert_eq!(s.rows[2].mr, unique as f64 / w.run.len() as f64);
        for pair in s.rows.windows(2) {
            assert!(pair[1].params.cache_tier_space() > pair[0].params.cache_tier_space());
            assert!(pair[1].mr <= pair[0].mr);
        }
        assert_eq!(s.to_csv().lines().count(), 4);
    }

    #[test]
    fn evaluate_single_config() {
        let w = generate(&WorkloadSpec::workload_b(100, 500, 3)).unwrap();
        let cfg = EvalConfig {
            config_id: "mem".into(),
            store: StoreBundle::memory_only(),
            instance: InstanceSpec::new(1.0, 1, 8 << 20).unwrap(),
            storage_tier: None,
            slo_p99_us: 1e6,
            headroom: Headroom::default(),
        };
        let opts = EvalOptions {
            measure: MeasureParams {
                max_concurrency: 2,
                ..MeasureParams::quick()
            },
            ..Default::default()
        };
        let prof = WorkloadProfile::new(1000.0, 1e6, 110.0, 0.95).unwrap();
        let (r, ms) = evaluate(&[cfg], &prof, &w, opts).unwrap();
        assert_eq!(r.winner.as_deref(), Some("mem"));
        assert_eq!(ms.len(), 1);
        let c = r.row("mem").unwrap();
        assert!(c.max_perf > 0.0 && c.max_space > 0.0);
        assert!(matches!(evaluate(&[], &prof, &w, opts), Err(EvalError::NoConfigs)));
    }
}
