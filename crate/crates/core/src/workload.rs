//! YCSB-style workload generation, the trace file format, and replay.
//!
//! Trace format, ASCII with LF line ends:
//!
//! ```text
//! #tierkv-trace v1
//! <ts_us> GET <key>
//! <ts_us> SET <key> <base64(value)>
//! <ts_us> DEL <key>
//! ```
//!
//! Zipfian key popularity assigns rank `r` probability `r^-theta / H`. Ranks
//! map to key indices through a fixed permutation (indices ordered by their
//! 64-bit FNV-1a hash) so hot keys are not adjacent and spread over shards.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::elastic_exec::Executor;
use crate::hash::fnv1a64;
use crate::tier_sync::{Command, Reply, Request, TieredStore};

pub const TRACE_HEADER: &str = "#tierkv-trace v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("cannot read corpus file: {0}")]
    CorpusFileUnreadable(String),
    #[error("missing or unknown trace header")]
    BadHeader,
    #[error("malformed trace line {0}")]
    MalformedLine(usize),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("store unreachable: {0}")]
    StoreUnreachable(String),
}

impl From<io::Error> for WorkloadError {
    fn from(e: io::Error) -> Self {
        WorkloadError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDistribution {
    Zipfian(f64),
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordSize {
    Fixed(usize),
    /// Uniform in `[min, max]`.
    Between(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueSource {
    /// Random printable bytes.
    Random,
    /// Non-empty lines of a file, drawn at random.
    CorpusFile(PathBuf),
    /// Lines supplied in memory.
    Corpus(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub key_count: usize,
    pub record_size: RecordSize,
    pub distribution: KeyDistribution,
    pub read_fraction: f64,
    pub op_count: usize,
    pub seed: u64,
    pub value_source: ValueSource,
    /// Rate used to stamp trace timestamps.
    pub nominal_qps: f64,
}

impl WorkloadSpec {
    /// 50% reads, 50% updates.
    pub fn workload_a(key_count: usize, op_count: usize, seed: u64) -> Self {
        Self {
            key_count,
            record_size: RecordSize::Fixed(100),
            distribution: KeyDistribution::Zipfian(0.99),
            read_fraction: 0.5,
            op_count,
            seed,
            value_source: ValueSource::Random,
            nominal_qps: 10_000.0,
        }
    }

    /// 95% reads, 5% updates.
    pub fn workload_b(key_count: usize, op_count: usize, seed: u64) -> Self {
        Self {
            read_fraction: 0.95,
            ..Self::workload_a(key_count, op_count, seed)
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.into()));
        if self.key_count == 0 {
            return bad("key_count must be positive");
        }
        if let KeyDistribution::Zipfian(theta) = self.distribution {
            if !(theta > 0.0 && theta < 1.0) {
                return bad("zipfian theta must be in (0,1)");
            }
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("read_fraction must be in [0,1]");
        }
        if let RecordSize::Between(lo, hi) = self.record_size {
            if lo > hi {
                return bad("record size min exceeds max");
            }
        }
        if !(self.nominal_qps > 0.0) {
            return bad("nominal_qps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Get,
    Set(Vec<u8>),
    Del,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub ts_us: u64,
    pub op: TraceOp,
    pub key: String,
}

impl TraceRecord {
    pub fn to_command(&self) -> Command {
        let k = self.key.as_bytes().to_vec();
        match &self.op {
            TraceOp::Get => Command::Get(k),
            TraceOp::Set(v) => Command::Set(k, v.clone()),
            TraceOp::Del => Command::Del(k),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.key.as_str())
    }

    pub fn duration(&self) -> Duration {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => Duration::from_micros(b.ts_us - a.ts_us),
            _ => Duration::ZERO,
        }
    }
}

/// Load phase (one SET per key) and run phase of a generated workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub load: Trace,
    pub run: Trace,
}

impl Workload {
    /// Load then run, with run timestamps shifted after the load phase.
    pub fn combined(&self) -> Trace {
        let offset = self.load.records.last().map_or(0, |r| r.ts_us + 1);
        let mut records = self.load.records.clone();
        records.extend(self.run.records.iter().map(|r| TraceRecord {
            ts_us: r.ts_us + offset,
            ..r.clone()
        }));
        Trace { records }
    }
}

pub fn key_name(index: usize) -> String {
    format!("user{index:08}")
}

/// Zipfian rank sampler over `n` items.
#[derive(Debug, Clone)]
pub struct ZipfianGenerator {
    zipf: Zipf<f64>,
    n: usize,
    theta: f64,
}

impl ZipfianGenerator {
    pub fn new(n: usize, theta: f64) -> Self {
        Self {
            zipf: Zipf::new(n as f64, theta).expect("valid zipf parameters"),
            n,
            theta,
        }
    }

    /// A rank in `1..=n`; rank 1 is the most popular.
    pub fn sample_rank<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        (self.zipf.sample(rng) as usize).clamp(1, self.n)
    }

    /// Exact probability of `rank`.
    pub fn probability(&self, rank: usize) -> f64 {
        let h: f64 = (1..=self.n).map(|r| (r as f64).powf(-self.theta)).sum();
        (rank as f64).powf(-self.theta) / h
    }
}

/// Key index holding each popularity rank (`perm[rank-1]`).
pub fn rank_permutation(n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| (fnv1a64(&(i as u64).to_le_bytes()), i));
    idx
}

fn load_corpus(src: &ValueSource) -> Result<Option<Vec<Vec<u8>>>, WorkloadError> {
    match src {
        ValueSource::Random => Ok(None),
        ValueSource::Corpus(lines) => {
            if lines.is_empty() {
                return Err(WorkloadError::CorpusFileUnreadable("empty corpus".into()));
            }
            Ok(Some(lines.clone()))
        }
        ValueSource::CorpusFile(path) => {
            let data = fs::read(path)
                .map_err(|e| WorkloadError::CorpusFileUnreadable(format!("{}: {e}", path.display())))?;
            let lines: Vec<Vec<u8>> = data
                .split(|&b| b == b'\n')
                .filter(|l| !l.is_empty())
                .map(<[u8]>::to_vec)
                .collect();
            if lines.is_empty() {
                return Err(WorkloadError::CorpusFileUnreadable(format!(
                    "{}: no records",
                    path.display()
                )));
            }
            Ok(Some(lines))
        }
    }
}

const PRINTABLE: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

/// Builds the load and run phases. Deterministic in `spec`.
pub fn generate(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let corpus = load_corpus(&spec.value_source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step_us = 1e6 / spec.nominal_qps;
    let ts = |i: usize| (i as f64 * step_us) as u64;

    let value = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        if let Some(lines) = &corpus {
            return lines[rng.random_range(0..lines.len())].clone();
        }
        let len = match spec.record_size {
            RecordSize::Fixed(n) => n,
            RecordSize::Between(lo, hi) => rng.random_range(lo..=hi),
        };
        (0..len)
            .map(|_| PRINTABLE[rng.random_range(0..PRINTABLE.len())])
            .collect()
    };

    let load = Trace {
        records: (0..spec.key_count)
            .map(|i| TraceRecord {
                ts_us: ts(i),
                op: TraceOp::Set(value(&mut rng)),
                key: key_name(i),
            })
            .collect(),
    };

    let perm = rank_permutation(spec.key_count);
    let zipf = match spec.distribution {
        KeyDistribution::Zipfian(theta) => Some(ZipfianGenerator::new(spec.key_count, theta)),
        KeyDistribution::Uniform => None,
    };
    let mut run = Vec::with_capacity(spec.op_count);
    for i in 0..spec.op_count {
        let index = match &zipf {
            Some(z) => perm[z.sample_rank(&mut rng) - 1],
            None => rng.random_range(0..spec.key_count),
        };
        let op = if rng.random::<f64>() < spec.read_fraction {
            TraceOp::Get
        } else {
            TraceOp::Set(value(&mut rng))
        };
        run.push(TraceRecord {
            ts_us: ts(i),
            op,
            key: key_name(index),
        });
    }
    Ok(Workload {
        load,
        run: Trace { records: run },
    })
}

/// JSON-like records sharing field names and enumerated values, for
/// dictionary training and compression experiments.
pub fn template_corpus(n: usize, seed: u64) -> Vec<Vec<u8>> {
    const STATUS: [&str; 3] = ["active", "suspended", "pending_review"];
    const REGION: [&str; 4] = ["us-east-1", "eu-west-1", "ap-southeast-2", "sa-east-1"];
    const PLAN: [&str; 3] = ["free", "professional", "enterprise"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            format!(
                "{{\"user_id\":{},\"status\":\"{}\",\"region\":\"{}\",\"plan\":\"{}\",\"last_login_ts\":{},\"preferences\":{{\"language\":\"en-US\",\"notifications\":true}}}}",
                rng.random_range(1_000_000..9_999_999u64),
                STATUS[rng.random_range(0..STATUS.len())],
                REGION[rng.random_range(0..REGION.len())],
                PLAN[rng.random_range(0..PLAN.len())],
                rng.random_range(1_600_000_000..1_700_000_000u64),
            )
            .into_bytes()
        })
        .collect()
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_graphic())
}

pub fn write_trace_to<W: Write>(trace: &Trace, out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(TRACE_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for r in &trace.records {
        match &r.op {
            TraceOp::Get => writeln!(out, "{} GET {}", r.ts_us, r.key)?,
            TraceOp::Del => writeln!(out, "{} DEL {}", r.ts_us, r.key)?,
            TraceOp::Set(v) => writeln!(out, "{} SET {} {}", r.ts_us, r.key, B64.encode(v))?,
        }
    }
    out.flush()
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), WorkloadError> {
    write_trace_to(trace, fs::File::create(path)?)?;
    Ok(())
}

pub fn read_trace_from<R: BufRead>(input: R) -> Result<Trace, WorkloadError> {
    let mut lines = input.split(b'\n');
    match lines.next() {
        Some(Ok(h)) if h == TRACE_HEADER.as_bytes() => {}
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(WorkloadError::BadHeader),
    }
    let mut records = Vec::new();
    let mut last_ts = 0;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let bad = || WorkloadError::MalformedLine(line_no);
        let text = std::str::from_utf8(&line).map_err(|_| bad())?;
        let fields: Vec<&str> = text.split(' ').collect();
        let ts_us: u64 = fields[0].parse().map_err(|_| bad())?;
        if fields.len() < 3 || ts_us < last_ts || !valid_key(fields[2]) {
            return Err(bad());
        }
        let op = match (fields[1], fields.len()) {
            ("GET", 3) => TraceOp::Get,
            ("DEL", 3) => TraceOp::Del,
            ("SET", 4) => TraceOp::Set(B64.decode(fields[3]).map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        last_ts = ts_us;
        records.push(TraceRecord {
            ts_us,
            op,
            key: fields[2].to_string(),
        });
    }
    Ok(Trace { records })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace, WorkloadError> {
    read_trace_from(BufReader::new(fs::File::open(path)?))
}

/// Outcome of one replayed operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOutcome {
    Ok,
    /// The store answered with an error (e.g. backpressure).
    Failed,
}

/// Counters a replay target exposes; the report uses deltas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TargetCounters {
    pub storage_reads: u64,
    pub storage_writes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Something a trace can be replayed against.
pub trait ReplayTarget: Send + Sync {
    fn execute(&self, session: u64, record: &TraceRecord) -> Result<OpOutcome, WorkloadError>;
    fn counters(&self) -> TargetCounters;
}

fn outcome(reply: &Reply) -> OpOutcome {
    if reply.is_err() {
        OpOutcome::Failed
    } else {
        OpOutcome::Ok
    }
}

fn store_counters(store: &TieredStore) -> TargetCounters {
    let s = store.stats();
    TargetCounters {
        storage_reads: s.storage.reads + s.storage.multi_reads,
        storage_writes: s.storage.writes,
        cache_hits: s.sync.hits,
        cache_misses: s.sync.misses,
    }
}

impl ReplayTarget for TieredStore {
    fn execute(&self, session: u64, record: &TraceRecord) -> Result<OpOutcome, WorkloadError> {
        Ok(outcome(&TieredStore::execute(self, session, record.to_command())))
    }

    fn counters(&self) -> TargetCounters {
        store_counters(self)
    }
}

impl ReplayTarget for Executor<TieredStore> {
    fn execute(&self, session: u64, record: &TraceRecord) -> Result<OpOutcome, WorkloadError> {
        self.call(Request::new(session, record.to_command()))
            .map(|r| outcome(&r))
            .map_err(|e| WorkloadError::StoreUnreachable(e.to_string()))
    }

    fn counters(&self) -> TargetCounters {
        store_counters(self.service())
    }
}

impl<T: ReplayTarget + ?Sized> ReplayTarget for Arc<T> {
    fn execute(&self, session: u64, record: &TraceRecord) -> Result<OpOutcome, WorkloadError> {
        (**self).execute(session, record)
    }

    fn counters(&self) -> TargetCounters {
        (**self).counters()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    MaxThroughput,
    /// Issue each op at its trace timestamp.
    Timed,
    FixedQps(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayReport {
    pub ops: u64,
    pub gets: u64,
    pub sets: u64,
    pub dels: u64,
    pub failed: u64,
    pub elapsed_s: f64,
    pub achieved_qps: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
    pub storage_reads: u64,
    pub storage_writes: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl ReplayReport {
    pub const CSV_HEADER: &'static str = "ops,gets,sets,dels,failed,elapsed_s,achieved_qps,p50_us,p99_us,p999_us,storage_reads,storage_writes,cache_hits,cache_misses";

    pub fn hit_ratio(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }

    pub fn miss_ratio(&self) -> f64 {
        let total = self.cache_hits + self.cache_misses;
        if total == 0 {
            0.0
        } else {
            self.cache_misses as f64 / total as f64
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.3},{:.3},{:.3},{:.3},{},{},{},{}",
            self.ops,
            self.gets,
            self.sets,
            self.dels,
            self.failed,
            self.elapsed_s,
            self.achieved_qps,
            self.p50_us,
            self.p99_us,
            self.p999_us,
            self.storage_reads,
            self.storage_writes,
            self.cache_hits,
            self.cache_misses
        )
    }
}

impl std::fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "ops {} (get {}, set {}, del {}, failed {}) in {:.3}s",
            self.ops, self.gets, self.sets, self.dels, self.failed, self.elapsed_s
        )?;
        writeln!(f, "throughput {:.1} ops/s", self.achieved_qps)?;
        writeln!(
            f,
            "latency us p50 {:.1} p99 {:.1} p999 {:.1}",
            self.p50_us, self.p99_us, self.p999_us
        )?;
        write!(
            f,
            "cache hits {} misses {} (hit ratio {:.4}), storage reads {} writes {}",
            self.cache_hits,
            self.cache_misses,
            self.hit_ratio(),
            self.storage_reads,
            self.storage_writes
        )
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Replays `trace` with `clients` concurrent sessions. Keys hash to
/// sessions, so every key's operations are issued in trace order.
pub fn replay<T: ReplayTarget + ?Sized>(
    trace: &Trace,
    target: &T,
    pacing: Pacing,
    clients: usize,
) -> Result<ReplayReport, WorkloadError> {
    let clients = clients.max(1);
    let mut lanes: Vec<Vec<(usize, &TraceRecord)>> = vec![Vec::new(); clients];
    for (i, r) in trace.records.iter().enumerate() {
        let lane = (fnv1a64(r.key.as_bytes()) % clients as u64) as usize;
        lanes[lane].push((i, r));
    }
    let t0 = trace.records.first().map_or(0, |r| r.ts_us);
    let before = target.counters();
    let started = Instant::now();

    let results: Vec<Result<(Vec<f64>, u64), WorkloadError>> = thread::scope(|s| {
        let handles: Vec<_> = lanes
            .iter()
            .enumerate()
            .map(|(session, lane)| {
                s.spawn(move || {
                    let mut lat = Vec::with_capacity(lane.len());
                    let mut failed = 0;
                    for &(i, r) in lane {
                        let due = match pacing {
                            Pacing::MaxThroughput => None,
                            Pacing::Timed => Some(Duration::from_micros(r.ts_us - t0)),
                            Pacing::FixedQps(q) => Some(Duration::from_secs_f64(i as f64 / q)),
                        };
                        if let Some(due) = due {
                            let now = started.elapsed();
                            if due > now {
                                thread::sleep(due - now);
                            }
                        }
                        let t = Instant::now();
                        if target.execute(session as u64, r)? == OpOutcome::Failed {
                            failed += 1;
                        }
                        lat.push(t.elapsed().as_secs_f64() * 1e6);
                    }
                    Ok((lat, failed))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay client panicked")).collect()
    });
    let elapsed = started.elapsed().as_secs_f64();

    let mut latencies = Vec::with_capacity(trace.len());
    let mut failed = 0;
    for r in results {
        let (l, f) = r?;
        latencies.extend(l);
        failed += f;
    }
    latencies.sort_by(f64::total_cmp);
    let after = target.counters();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in &trace.records {
        let name = match r.op {
            TraceOp::Get => "get",
            TraceOp::Set(_) => "set",
            TraceOp::Del => "del",
        };
        *counts.entry(name).or_default() += 1;
    }
    let ops = trace.len() as u64;
    Ok(ReplayReport {
        ops,
        gets: counts.get("get").copied().unwrap_or(0),
        sets: counts.get("set").copied().unwrap_or(0),
        dels: counts.get("del").copied().unwrap_or(0),
        failed,
        elapsed_s: elapsed,
        achieved_qps: if elapsed > 0.0 { ops as f64 / elapsed } else { 0.0 },
        p50_us: percentile(&latencies, 0.50),
        p99_us: percentile(&latencies, 0.99),
        p999_us: percentile(&latencies, 0.999),
        storage_reads: after.storage_reads - before.storage_reads,
        storage_writes: after.storage_writes - before.storage_writes,
        cache_hits: after.cache_hits - before.cache_hits,
        cache_misses: after.cache_misses - before.cache_misses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_core::charged_bytes;
    use crate::mrc::{full_miss_ratio_curve, stack_distance_histogram};
    use crate::storage::{SimulatedBackend, StorageBackend};
    use crate::tier_sync::{StoreConfig, SyncPolicy};

    fn to_bytes(t: &Trace) -> Vec<u8> {
        let mut buf = Vec::new();
        write_trace_to(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn read_only_mix_has_only_gets() {
        let mut spec = WorkloadSpec::workload_b(100, 1000, 1);
        spec.read_fraction = 1.0;
        let w = generate(&spec).unwrap();
        assert!(w.run.records.iter().all(|r| r.op == TraceOp::Get));
        assert_eq!(w.load.len(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = WorkloadSpec::workload_a(50, 500, 42);
        let a = to_bytes(&generate(&spec).unwrap().combined());
        let b = to_bytes(&generate(&spec).unwrap().combined());
        assert_eq!(a, b);
        let other = WorkloadSpec { seed: 43, ..spec };
        assert_ne!(a, to_bytes(&generate(&other).unwrap().combined()));
    }

    #[test]
    fn zipf_frequencies_fall_with_rank() {
        let mut spec = WorkloadSpec::workload_b(10_000, 100_000, 7);
        spec.read_fraction = 1.0;
        let w = generate(&spec).unwrap();
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for k in w.run.keys() {
            *freq.entry(k).or_default() += 1;
        }
        let perm = rank_permutation(10_000);
        let f = |rank: usize| freq.get(key_name(perm[rank - 1]).as_str()).copied().unwrap_or(0);
        assert!(f(1) > f(2) && f(2) > f(10));
        for r in 1..10 {
            assert!(f(r) >= f(r + 1), "rank {r}");
        }
    }

    #[test]
    fn rank_permutation_is_bijective() {
        let mut p = rank_permutation(1000);
        assert_ne!(p[..10], (0..10).collect::<Vec<_>>()[..]);
        p.sort();
        assert_eq!(p, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn trace_format_is_exact() {
        let t = Trace {
            records: vec![
                TraceRecord { ts_us: 0, op: TraceOp::Set(b"hi".to_vec()), key: "a".into() },
                TraceRecord { ts_us: 5, op: TraceOp::Get, key: "a".into() },
                TraceRecord { ts_us: 5, op: TraceOp::Del, key: "a".into() },
            ],
        };
        let bytes = to_bytes(&t);
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "#tierkv-trace v1\n0 SET a aGk=\n5 GET a\n5 DEL a\n"
        );
        assert_eq!(read_trace_from(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn trace_errors() {
        assert_eq!(read_trace_from(&b"0 GET a\n"[..]), Err(WorkloadError::BadHeader));
        assert_eq!(read_trace_from(&b""[..]), Err(WorkloadError::BadHeader));
        let bad = b"#tierkv-trace v1\n0 GET a\n1 GET a aGk=\n";
        assert_eq!(read_trace_from(&bad[..]), Err(WorkloadError::MalformedLine(3)));
        let back = b"#tierkv-trace v1\n5 GET a\n1 GET a\n";
        assert_eq!(read_trace_from(&back[..]), Err(WorkloadError::MalformedLine(3)));
        let b64 = b"#tierkv-trace v1\n0 SET a !!\n";
        assert_eq!(read_trace_from(&b64[..]), Err(WorkloadError::MalformedLine(2)));
    }

    #[test]
    fn corpus_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::write(&path, b"alpha\n\nbeta\n").unwrap();
        let mut spec = WorkloadSpec::workload_a(20, 0, 3);
        spec.value_source = ValueSource::CorpusFile(path);
        let w = generate(&spec).unwrap();
        for r in &w.load.records {
            let TraceOp::Set(v) = &r.op else { panic!() };
            assert!(v == b"alpha" || v == b"beta");
        }
        spec.value_source = ValueSource::CorpusFile(dir.path().join("missing"));
        assert!(matches!(generate(&spec), Err(WorkloadError::CorpusFileUnreadable(_))));
    }

    #[test]
    fn replay_conserves_ops() {
        let store = TieredStore::new(StoreConfig::new(1 << 20, SyncPolicy::MemoryOnly), None);
        let w = generate(&WorkloadSpec::workload_a(100, 2000, 9)).unwrap();
        let r = replay(&w.combined(), &store, Pacing::MaxThroughput, 4).unwrap();
        assert_eq!(r.ops, 2100);
        assert_eq!(r.gets + r.sets + r.dels, 2100);
        assert_eq!(r.failed, 0);
        assert!(r.p50_us <= r.p99_us && r.p99_us <= r.p999_us);
    }

    #[test]
    fn fixed_qps_pacing() {
        let store = TieredStore::new(StoreConfig::new(1 << 20, SyncPolicy::MemoryOnly), None);
        let mut spec = WorkloadSpec::workload_b(100, 500, 1);
        spec.nominal_qps = 500.0;
        let w = generate(&spec).unwrap();
        let r = replay(&w.run, &store, Pacing::FixedQps(500.0), 2).unwrap();
        assert!((r.achieved_qps - 500.0).abs() / 500.0 < 0.1, "{}", r.achieved_qps);
    }

    #[test]
    fn hit_ratio_matches_miss_ratio_curve() {
        let mut spec = WorkloadSpec::workload_b(500, 5000, 11);
        spec.read_fraction = 1.0;
        spec.record_size = RecordSize::Fixed(32);
        let w = generate(&spec).unwrap();
        let curve = full_miss_ratio_curve(&stack_distance_histogram(w.run.keys())).unwrap();
        for k in [1usize, 10, 50, 200] {
            let backend = Arc::new(SimulatedBackend::new());
            for r in &w.load.records {
                let TraceOp::Set(v) = &r.op else { unreachable!() };
                backend.preload([(r.key.clone().into_bytes(), v.clone())]);
            }
            let per_entry = charged_bytes(12, 32, 64);
            let store = TieredStore::new(
                StoreConfig::new(k * per_entry, SyncPolicy::WriteThrough).with_shards(1),
                Some(backend as Arc<dyn StorageBackend>),
            );
            let r = replay(&w.run, &store, Pacing::MaxThroughput, 1).unwrap();
            assert_eq!(r.miss_ratio(), curve.miss_ratio_at(k), "k={k}");
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&v, 0.999), 100.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
