//! Cache/storage synchronization.
//!
//! [`TieredStore`] puts a sharded [`CacheShard`] tier in front of a
//! [`StorageBackend`] and keeps them in step under one of three policies:
//!
//! * **Write-through**: a tick's updates are staged in per-session buffers,
//!   coalesced per key into one storage batch, and only promoted into the
//!   cache once storage acknowledges. A failed batch invalidates the cached
//!   copies of its keys and fails every caller that contributed to it.
//! * **Write-back**: updates land in the cache as dirty entries and are
//!   acknowledged at once. Deletes become dirty tombstones. [`TieredStore::flush`]
//!   persists every dirty key (last value only) in one batch. Dirty bytes
//!   are capped; past the cap writers get [`StoreError::Backpressure`].
//!   Read-modify-write updates on keys that are not resident are parked and
//!   their keys fetched with a single `multi_read`.
//! * **Memory-only**: no storage tier, entries are never evicted.
//!
//! Work arrives in ticks: a tick is the batch of requests one executor
//! drain hands to a shard (see [`TieredStore::apply_tick`]).

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::compression::{
    self, should_retrain, Codec, CompressionMonitor, CompressionStats, Dictionary, RetrainPolicy,
    TrainParams,
};
use crate::kv_core::{
    charged_bytes, shard_index, CacheError, CacheShard, CacheStats, StoredValue,
    DEFAULT_ENTRY_OVERHEAD, DEFAULT_SHARDS,
};
use crate::storage::{BatchOp, StorageBackend, StorageCounters};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("storage write failed: {0}")]
    StorageWriteFailed(String),
    #[error("storage read failed: {0}")]
    StorageReadFailed(String),
    #[error("dirty data limit reached, retry after flush")]
    Backpressure,
    #[error("entry too large for cache: {0}")]
    CapacityExceeded(String),
    #[error("out of memory")]
    OutOfMemory,
    #[error("value is not an integer")]
    NotAnInteger,
    #[error("corrupt cached value: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncPolicy {
    WriteThrough,
    WriteBack,
    /// Single tier: no storage, no eviction.
    MemoryOnly,
}

impl SyncPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "write-through" | "write_through" | "wt" => Some(Self::WriteThrough),
            "write-back" | "write_back" | "wb" => Some(Self::WriteBack),
            "memory" | "memory-only" | "memory_only" => Some(Self::MemoryOnly),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::WriteThrough => "write-through",
            Self::WriteBack => "write-back",
            Self::MemoryOnly => "memory-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncConfig {
    pub policy: SyncPolicy,
    pub flush_interval: Duration,
    pub dirty_max_bytes: usize,
    /// Fraction of `dirty_max_bytes` at which a flush is due.
    pub dirty_high_watermark: f64,
    /// Parked keys that force an early batch fetch.
    pub deferred_fetch_batch: usize,
    /// Copies of cache-tier data kept for durability; scales cache space
    /// cost in the evaluator.
    pub replica_factor: f64,
}

impl SyncConfig {
    pub fn new(policy: SyncPolicy) -> Self {
        Self {
            policy,
            flush_interval: Duration::from_millis(200),
            dirty_max_bytes: 64 << 20,
            dirty_high_watermark: 0.9,
            deferred_fetch_batch: 64,
            replica_factor: if policy == SyncPolicy::WriteBack { 2.0 } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    /// Total cache bytes, split evenly across shards.
    pub cache_capacity: usize,
    pub shards: usize,
    pub entry_overhead: usize,
    pub sync: SyncConfig,
}

impl StoreConfig {
    pub fn new(cache_capacity: usize, policy: SyncPolicy) -> Self {
        Self {
            cache_capacity,
            shards: DEFAULT_SHARDS,
            entry_overhead: DEFAULT_ENTRY_OVERHEAD,
            sync: SyncConfig::new(policy),
        }
    }

    pub fn with_shards(mut self, shards: usize) -> Self {
        self.shards = shards;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Get(Vec<u8>),
    Set(Vec<u8>, Vec<u8>),
    Del(Vec<u8>),
    /// Read-modify-write: appends to the current value (empty if absent).
    Append(Vec<u8>, Vec<u8>),
    /// Read-modify-write: adds to the decimal integer value (0 if absent).
    Incr(Vec<u8>, i64),
}

impl Command {
    pub fn key(&self) -> &[u8] {
        match self {
            Command::Get(k)
            | Command::Set(k, _)
            | Command::Del(k)
            | Command::Append(k, _)
            | Command::Incr(k, _) => k,
        }
    }

    fn is_update(&self) -> bool {
        !matches!(self, Command::Get(_))
    }

    fn needs_base(&self) -> bool {
        matches!(self, Command::Append(..) | Command::Incr(..))
    }
}

/// A command tagged with the client session that issued it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub session: u64,
    pub cmd: Command,
}

impl Request {
    pub fn new(session: u64, cmd: Command) -> Self {
        Self { session, cmd }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ok,
    Value(Option<Vec<u8>>),
    Integer(i64),
    Err(StoreError),
}

impl Reply {
    pub fn is_err(&self) -> bool {
        matches!(self, Reply::Err(_))
    }
}

/// Synchronization counters. All are monotone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SyncCounters {
    pub reads: u64,
    pub hits: u64,
    pub misses: u64,
    /// Storage reads issued to serve misses.
    pub miss_fetches: u64,
    /// Time spent in storage reads serving misses.
    pub miss_penalty_ns: u64,
    /// Commands that shared a storage write with an earlier one on the same key.
    pub coalesced_writes: u64,
    pub write_failures: u64,
    pub backpressure_events: u64,
    pub flushes: u64,
    pub flush_retries: u64,
    pub flushed_keys: u64,
    pub parked_updates: u64,
    pub deferred_fetches: u64,
}

#[derive(Debug, Default)]
struct AtomicSyncCounters {
    reads: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    miss_fetches: AtomicU64,
    miss_penalty_ns: AtomicU64,
    coalesced_writes: AtomicU64,
    write_failures: AtomicU64,
    backpressure_events: AtomicU64,
    flushes: AtomicU64,
    flush_retries: AtomicU64,
    flushed_keys: AtomicU64,
    parked_updates: AtomicU64,
    deferred_fetches: AtomicU64,
}

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

impl AtomicSyncCounters {
    fn snapshot(&self) -> SyncCounters {
        let l = |c: &AtomicU64| c.load(Ordering::Relaxed);
        SyncCounters {
            reads: l(&self.reads),
            hits: l(&self.hits),
            misses: l(&self.misses),
            miss_fetches: l(&self.miss_fetches),
            miss_penalty_ns: l(&self.miss_penalty_ns),
            coalesced_writes: l(&self.coalesced_writes),
            write_failures: l(&self.write_failures),
            backpressure_events: l(&self.backpressure_events),
            flushes: l(&self.flushes),
            flush_retries: l(&self.flush_retries),
            flushed_keys: l(&self.flushed_keys),
            parked_updates: l(&self.parked_updates),
            deferred_fetches: l(&self.deferred_fetches),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreStats {
    pub sync: SyncCounters,
    pub cache: CacheStats,
    /// Dirty cache bytes plus pending tombstones.
    pub dirty_bytes: usize,
    pub storage: StorageCounters,
    pub compression: Option<CompressionStats>,
}

impl StoreStats {
    pub fn miss_ratio(&self) -> f64 {
        if self.sync.reads == 0 {
            0.0
        } else {
            self.sync.misses as f64 / self.sync.reads as f64
        }
    }
}

/// What one flush did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlushOutcome {
    pub flushed: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy)]
struct Tombstone {
    charged: usize,
    seq: u64,
}

#[derive(Debug)]
struct SyncShard {
    cache: CacheShard,
    /// Write-back deletes not yet persisted.
    tombstones: HashMap<Vec<u8>, Tombstone>,
    tomb_seq: u64,
}

/// Per-key ordered queue of the updates a tick applied, in arrival order.
/// Storage receives only the last one; every contributor shares its fate.
#[derive(Debug, Default)]
pub struct PendingWriteQueue {
    order: Vec<Vec<u8>>,
    per_key: HashMap<Vec<u8>, Vec<(usize, Option<Vec<u8>>)>>,
}

impl PendingWriteQueue {
    pub fn push(&mut self, key: &[u8], op_index: usize, value: Option<Vec<u8>>) {
        let q = self.per_key.entry(key.to_vec()).or_insert_with(|| {
            self.order.push(key.to_vec());
            Vec::new()
        });
        q.push((op_index, value));
    }

    /// The newest value queued for `key`, if any.
    pub fn latest(&self, key: &[u8]) -> Option<&Option<Vec<u8>>> {
        self.per_key.get(key).and_then(|q| q.last()).map(|(_, v)| v)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// One batch operation per key carrying that key's final value.
    pub fn coalesce(&self) -> Vec<BatchOp> {
        self.order
            .iter()
            .map(|k| BatchOp {
                key: k.clone(),
                value: self.per_key[k].last().unwrap().1.clone(),
            })
            .collect()
    }

    pub fn op_count(&self) -> usize {
        self.per_key.values().map(Vec::len).sum()
    }

    pub fn contributors(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_key.values().flatten().map(|(i, _)| *i)
    }
}

/// Per-session view of the updates a session issued in the current tick.
#[derive(Debug, Default)]
pub struct TempUpdateBuffer {
    sessions: HashMap<u64, HashMap<Vec<u8>, Option<Vec<u8>>>>,
}

impl TempUpdateBuffer {
    pub fn stage(&mut self, session: u64, key: &[u8], value: Option<Vec<u8>>) {
        self.sessions
            .entry(session)
            .or_default()
            .insert(key.to_vec(), value);
    }

    pub fn lookup(&self, session: u64, key: &[u8]) -> Option<&Option<Vec<u8>>> {
        self.sessions.get(&session)?.get(key)
    }

    pub fn discard(&mut self) {
        self.sessions.clear();
    }
}

struct CodecState {
    current: Arc<Codec>,
    by_version: HashMap<u8, Arc<Codec>>,
    /// Recent raw values kept as retraining samples.
    reservoir: Vec<Vec<u8>>,
    reservoir_next: usize,
}

const RESERVOIR: usize = 512;

/// A cache tier over a storage tier. Safe to share across threads; each
/// shard is guarded by its own lock.
pub struct TieredStore {
    config: StoreConfig,
    shards: Vec<Mutex<SyncShard>>,
    storage: Option<Arc<dyn StorageBackend>>,
    codec: RwLock<Option<CodecState>>,
    monitor: CompressionMonitor,
    counters: AtomicSyncCounters,
    dirty_bytes: AtomicUsize,
    flush_lock: Mutex<()>,
    last_flush: Mutex<Instant>,
}

impl std::fmt::Debug for TieredStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TieredStore")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

fn parse_int(bytes: &[u8]) -> Result<i64, StoreError> {
    std::str::from_utf8(bytes)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(StoreError::NotAnInteger)
}

/// Applies a read-modify-write command to a base value.
fn apply_update(cmd: &Command, base: Option<&[u8]>) -> Result<(Option<Vec<u8>>, Reply), StoreError> {
    match cmd {
        Command::Set(_, v) => Ok((Some(v.clone()), Reply::Ok)),
        Command::Del(_) => Ok((None, Reply::Integer(base.is_some() as i64))),
        Command::Append(_, suffix) => {
            let mut v = base.map(<[u8]>::to_vec).unwrap_or_default();
            v.extend_from_slice(suffix);
            let len = v.len() as i64;
            Ok((Some(v), Reply::Integer(len)))
        }
        Command::Incr(_, by) => {
            let cur = match base {
                Some(b) => parse_int(b)?,
                None => 0,
            };
            let next = cur.checked_add(*by).ok_or(StoreError::NotAnInteger)?;
            Ok((Some(next.to_string().into_bytes()), Reply::Integer(next)))
        }
        Command::Get(_) => unreachable!("reads are not updates"),
    }
}

impl TieredStore {
    /// Builds a store. `storage` must be present unless the policy is
    /// memory-only.
    pub fn new(config: StoreConfig, storage: Option<Arc<dyn StorageBackend>>) -> Self {
        assert!(
            config.shards.is_power_of_two(),
            "shard count must be a power of two"
        );
        assert!(
            storage.is_some() || config.sync.policy == SyncPolicy::MemoryOnly,
            "tiered policies need a storage backend"
        );
        assert!(
            config.sync.policy != SyncPolicy::WriteBack || config.sync.dirty_max_bytes > 0,
            "write-back needs dirty_max_bytes > 0"
        );
        let per_shard = config.cache_capacity / config.shards;
        let shards = (0..config.shards)
            .map(|_| {
                Mutex::new(SyncShard {
                    cache: CacheShard::with_overhead(per_shard, config.entry_overhead),
                    tombstones: HashMap::new(),
                    tomb_seq: 0,
                })
            })
            .collect();
        Self {
            config,
            shards,
            storage,
            codec: RwLock::new(None),
            monitor: CompressionMonitor::default(),
            counters: AtomicSyncCounters::default(),
            dirty_bytes: AtomicUsize::new(0),
            flush_lock: Mutex::new(()),
            last_flush: Mutex::new(Instant::now()),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn policy(&self) -> SyncPolicy {
        self.config.sync.policy
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_for(&self, key: &[u8]) -> usize {
        shard_index(key, self.shards.len())
    }

    pub fn storage(&self) -> Option<&Arc<dyn StorageBackend>> {
        self.storage.as_ref()
    }

    fn backend(&self) -> &Arc<dyn StorageBackend> {
        self.storage.as_ref().expect("policy requires storage")
    }

    /// Enables value compression with `dict`. Earlier dictionaries stay
    /// available for decoding values they produced.
    pub fn install_dictionary(&self, dict: Arc<Dictionary>, baseline_ratio: f64) {
        let codec = Arc::new(Codec::new(dict));
        let mut guard = self.codec.write();
        let state = guard.get_or_insert_with(|| CodecState {
            current: codec.clone(),
            by_version: HashMap::new(),
            reservoir: Vec::new(),
            reservoir_next: 0,
        });
        state.by_version.insert(codec.version(), codec.clone());
        state.current = codec;
        self.monitor.reset(baseline_ratio);
    }

    pub fn dictionary_version(&self) -> Option<u8> {
        self.codec.read().as_ref().map(|s| s.current.version())
    }

    /// Retrains from recently written values when the monitor reports
    /// degradation. Returns the new dictionary version if one was installed.
    pub fn retrain_if_needed(&self, params: TrainParams, policy: RetrainPolicy) -> Option<u8> {
        let (samples, next_version) = {
            let guard = self.codec.read();
            let state = guard.as_ref()?;
            if !should_retrain(&self.monitor.stats(), policy) {
                return None;
            }
            (state.reservoir.clone(), state.current.version().wrapping_add(1))
        };
        let dict = compression::train_dictionary(
            &samples,
            TrainParams {
                version: next_version,
                ..params
            },
        )
        .ok()?;
        let dict = Arc::new(dict);
        let baseline = compression::measure_ratio(&Codec::new(dict.clone()), &samples).ratio();
        log::info!("installed dictionary v{next_version} (baseline ratio {baseline:.3})");
        self.install_dictionary(dict, baseline);
        Some(next_version)
    }

    fn encode(&self, raw: &[u8]) -> StoredValue {
        let mut guard = self.codec.write();
        let Some(state) = guard.as_mut() else {
            return StoredValue::raw(raw);
        };
        if state.reservoir.len() < RESERVOIR {
            state.reservoir.push(raw.to_vec());
        } else {
            let slot = state.reservoir_next % RESERVOIR;
            state.reservoir[slot] = raw.to_vec();
        }
        state.reservoir_next += 1;
        let enc = state.current.compress(raw);
        self.monitor.record(raw.len(), &enc);
        StoredValue::encoded(enc.bytes, state.current.version())
    }

    fn decode(&self, v: StoredValue) -> Result<Vec<u8>, StoreError> {
        match v.dict_version {
            None => Ok(v.bytes),
            Some(ver) => {
                let guard = self.codec.read();
                let codec = guard
                    .as_ref()
                    .and_then(|s| s.by_version.get(&ver))
                    .ok_or_else(|| StoreError::Corrupt(format!("no dictionary v{ver}")))?;
                codec
                    .decompress(&v.bytes)
                    .map_err(|e| StoreError::Corrupt(e.to_string()))
            }
        }
    }

    /// Executes one command as its own tick.
    pub fn execute(&self, session: u64, cmd: Command) -> Reply {
        let shard = self.shard_for(cmd.key());
        self.apply_tick(shard, vec![Request::new(session, cmd)])
            .pop()
            .expect("one reply per request")
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        match self.execute(0, Command::Get(key.to_vec())) {
            Reply::Value(v) => Ok(v),
            Reply::Err(e) => Err(e),
            other => unreachable!("GET replied {other:?}"),
        }
    }

    pub fn set(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        match self.execute(0, Command::Set(key.to_vec(), value.to_vec())) {
            Reply::Err(e) => Err(e),
            _ => Ok(()),
        }
    }

    pub fn delete(&self, key: &[u8]) -> Result<bool, StoreError> {
        match self.execute(0, Command::Del(key.to_vec())) {
            Reply::Integer(n) => Ok(n > 0),
            Reply::Err(e) => Err(e),
            other => unreachable!("DEL replied {other:?}"),
        }
    }

    /// Runs one tick of requests, all routed to `shard`, returning replies
    /// in request order. Afterwards a due write-back flush is performed.
    pub fn apply_tick(&self, shard: usize, requests: Vec<Request>) -> Vec<Reply> {
        debug_assert!(requests.iter().all(|r| self.shard_for(r.cmd.key()) == shard));
        let replies = {
            let mut sh = self.shards[shard].lock();
            match self.config.sync.policy {
                SyncPolicy::WriteThrough => self.tick_write_through(&mut sh, &requests),
                SyncPolicy::WriteBack => self.tick_write_back(&mut sh, &requests),
                SyncPolicy::MemoryOnly => self.tick_memory(&mut sh, &requests),
            }
        };
        if self.config.sync.policy == SyncPolicy::WriteBack {
            self.maybe_flush();
        }
        replies
    }

    // ---- shared helpers -------------------------------------------------

    /// Cache lookup, falling back to storage and populating on a hit there.
    fn read_through(&self, sh: &mut SyncShard, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        bump(&self.counters.reads, 1);
        if let Some(v) = sh.cache.get(key) {
            bump(&self.counters.hits, 1);
            return self.decode(v).map(Some);
        }
        if sh.tombstones.contains_key(key) {
            // known deleted: served without touching storage
            bump(&self.counters.hits, 1);
            return Ok(None);
        }
        bump(&self.counters.misses, 1);
        let Some(storage) = self.storage.as_ref() else {
            return Ok(None);
        };
        let started = Instant::now();
        let fetched = storage.read(key);
        bump(&self.counters.miss_fetches, 1);
        bump(
            &self.counters.miss_penalty_ns,
            started.elapsed().as_nanos() as u64,
        );
        let value = fetched.map_err(|e| StoreError::StorageReadFailed(e.to_string()))?;
        if let Some(v) = &value {
            self.put_clean(sh, key, v);
        }
        Ok(value)
    }

    /// Caches a clean copy; if it does not fit, any older copy is dropped so
    /// the cache never holds a stale value.
    fn put_clean(&self, sh: &mut SyncShard, key: &[u8], raw: &[u8]) {
        let stored = self.encode(raw);
        if sh.cache.put(key, stored, false).is_err() {
            self.drop_entry(sh, key);
        }
    }

    fn drop_entry(&self, sh: &mut SyncShard, key: &[u8]) {
        if let Some(e) = sh.cache.peek(key) {
            if e.dirty {
                self.dirty_bytes.fetch_sub(e.charged_bytes, Ordering::AcqRel);
            }
            sh.cache.delete(key);
        }
    }

    /// Reserves `delta` dirty bytes unless the limit has been reached.
    fn reserve_dirty(&self, delta: isize) -> Result<(), StoreError> {
        let max = self.config.sync.dirty_max_bytes;
        let mut cur = self.dirty_bytes.load(Ordering::Acquire);
        loop {
            if cur >= max {
                bump(&self.counters.backpressure_events, 1);
                return Err(StoreError::Backpressure);
            }
            let next = (cur as isize + delta).max(0) as usize;
            match self
                .dirty_bytes
                .compare_exchange(cur, next, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Ok(()),
                Err(actual) => cur = actual,
            }
        }
    }

    fn release_dirty(&self, delta: isize) {
        if delta > 0 {
            self.dirty_bytes.fetch_sub(delta as usize, Ordering::AcqRel);
        } else if delta < 0 {
            self.dirty_bytes.fetch_add((-delta) as usize, Ordering::AcqRel);
        }
    }

    fn old_dirty_charge(sh: &SyncShard, key: &[u8]) -> usize {
        let cached = sh
            .cache
            .peek(key)
            .filter(|e| e.dirty)
            .map_or(0, |e| e.charged_bytes);
        cached + sh.tombstones.get(key).map_or(0, |t| t.charged)
    }

    /// Write-back update: cache a dirty value (or a tombstone for `None`).
    fn write_dirty(&self, sh: &mut SyncShard, key: &[u8], value: Option<&[u8]>) -> Result<(), StoreError> {
        let old = Self::old_dirty_charge(sh, key) as isize;
        match value {
            Some(raw) => {
                let stored = self.encode(raw);
                let new = sh.cache.charge_for(key.len(), stored.bytes.len()) as isize;
                self.reserve_dirty(new - old)?;
                match sh.cache.put(key, stored, true) {
                    Ok(_) => {
                        sh.tombstones.remove(key);
                        Ok(())
                    }
                    Err(e) => {
                        self.release_dirty(new - old);
                        Err(match e {
                            CacheError::DirtyOverflow { .. } => {
                                bump(&self.counters.backpressure_events, 1);
                                StoreError::Backpressure
                            }
                            CacheError::CapacityExceeded { .. } => {
                                StoreError::CapacityExceeded(e.to_string())
                            }
                        })
                    }
                }
            }
            None => {
                let new = charged_bytes(key.len(), 0, self.config.entry_overhead);
                self.reserve_dirty(new as isize - old)?;
                // The cached copy (dirty or clean) is replaced by the tombstone.
                sh.cache.delete(key);
                sh.tomb_seq += 1;
                let seq = sh.tomb_seq;
                sh.tombstones.insert(key.to_vec(), Tombstone { charged: new, seq });
                Ok(())
            }
        }
    }

    // ---- memory-only ------------------------------------------------------

    fn tick_memory(&self, sh: &mut SyncShard, requests: &[Request]) -> Vec<Reply> {
        requests
            .iter()
            .map(|r| {
                let key = r.cmd.key();
                if let Command::Get(_) = r.cmd {
                    return match self.read_through(sh, key) {
                        Ok(v) => Reply::Value(v),
                        Err(e) => Reply::Err(e),
                    };
                }
                let base = match sh.cache.peek(key) {
                    Some(e) => match self.decode(e.value.clone()) {
                        Ok(v) => Some(v),
                        Err(e) => return Reply::Err(e),
                    },
                    None => None,
                };
                let (next, reply) = match apply_update(&r.cmd, base.as_deref()) {
                    Ok(x) => x,
                    Err(e) => return Reply::Err(e),
                };
                match next {
                    None => {
                        sh.cache.delete(key);
                    }
                    Some(v) => {
                        let stored = self.encode(&v);
                        let old = sh.cache.peek(key).map_or(0, |e| e.charged_bytes);
                        let new = sh.cache.charge_for(key.len(), stored.bytes.len());
                        let st = sh.cache.stats();
                        if st.bytes_used - old + new > st.bytes_capacity {
                            return Reply::Err(StoreError::OutOfMemory);
                        }
                        sh.cache.put(key, stored, false).expect("capacity checked");
                    }
                }
                reply
            })
            .collect()
    }

    // ---- write-through ----------------------------------------------------

    fn tick_write_through(&self, sh: &mut SyncShard, requests: &[Request]) -> Vec<Reply> {
        let mut replies: Vec<Option<Reply>> = vec![None; requests.len()];
        let mut pending = PendingWriteQueue::default();
        let mut buffer = TempUpdateBuffer::default();

        for (i, r) in requests.iter().enumerate() {
            let key = r.cmd.key();
            if !r.cmd.is_update() {
                let v = match buffer.lookup(r.session, key) {
                    Some(staged) => Ok(staged.clone()),
                    None => self.read_through(sh, key),
                };
                replies[i] = Some(match v {
                    Ok(v) => Reply::Value(v),
                    Err(e) => Reply::Err(e),
                });
                continue;
            }
            let base = match pending.latest(key) {
                Some(v) => Ok(v.clone()),
                None if r.cmd.needs_base() || matches!(r.cmd, Command::Del(_)) => {
                    self.current_value_wt(sh, key)
                }
                None => Ok(None),
            };
            let outcome = base.and_then(|b| apply_update(&r.cmd, b.as_deref()));
            match outcome {
                Ok((next, reply)) => {
                    buffer.stage(r.session, key, next.clone());
                    pending.push(key, i, next);
                    replies[i] = Some(reply);
                }
                Err(e) => replies[i] = Some(Reply::Err(e)),
            }
        }

        if !pending.is_empty() {
            let batch = pending.coalesce();
            bump(
                &self.counters.coalesced_writes,
                (pending.op_count() - batch.len()) as u64,
            );
            match self.backend().write_batch(&batch) {
                Ok(()) => {
                    for op in &batch {
                        match &op.value {
                            Some(v) => self.put_clean(sh, &op.key, v),
                            None => {
                                sh.cache.delete(&op.key);
                            }
                        }
                    }
                }
                Err(e) => {
                    bump(&self.counters.write_failures, 1);
                    for op in &batch {
                        sh.cache.delete(&op.key);
                    }
                    let err = StoreError::StorageWriteFailed(e.to_string());
                    for i in pending.contributors() {
                        replies[i] = Some(Reply::Err(err.clone()));
                    }
                }
            }
            buffer.discard();
        }
        replies.into_iter().map(|r| r.expect("every request answered")).collect()
    }

    /// Current committed value without counting a read or populating.
    fn current_value_wt(&self, sh: &mut SyncShard, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        if let Some(e) = sh.cache.peek(key) {
            return self.decode(e.value.clone()).map(Some);
        }
        self.backend()
            .read(key)
            .map_err(|e| StoreError::StorageReadFailed(e.to_string()))
    }

    // ---- write-back -------------------------------------------------------

    fn tick_write_back(&self, sh: &mut SyncShard, requests: &[Request]) -> Vec<Reply> {
        let mut replies: Vec<Option<Reply>> = vec![None; requests.len()];
        let mut parked: Vec<usize> = Vec::new();
        let mut parked_keys: HashSet<&[u8]> = HashSet::new();
        // values fetched for parked keys (None = absent in storage)
        let mut fetched: HashMap<Vec<u8>, Option<Vec<u8>>> = HashMap::new();

        for (i, r) in requests.iter().enumerate() {
            let key = r.cmd.key();
            let must_park = parked_keys.contains(key)
                || (r.cmd.needs_base()
                    && !sh.cache.contains(key)
                    && !sh.tombstones.contains_key(key)
                    && !fetched.contains_key(key));
            if must_park {
                parked.push(i);
                parked_keys.insert(key);
                bump(&self.counters.parked_updates, 1);
                if parked_keys.len() >= self.config.sync.deferred_fetch_batch.max(1) {
                    self.resolve_parked(sh, requests, &mut parked, &mut fetched, &mut replies);
                    parked_keys.clear();
                }
                continue;
            }
            replies[i] = Some(self.wb_apply(sh, &r.cmd, &fetched));
        }
        if !parked.is_empty() {
            self.resolve_parked(sh, requests, &mut parked, &mut fetched, &mut replies);
        }
        replies.into_iter().map(|r| r.expect("every request answered")).collect()
    }

    /// Fetches every parked key with one `multi_read`, then applies the
    /// parked requests in arrival order.
    fn resolve_parked(
        &self,
        sh: &mut SyncShard,
        requests: &[Request],
        parked: &mut Vec<usize>,
        fetched: &mut HashMap<Vec<u8>, Option<Vec<u8>>>,
        replies: &mut [Option<Reply>],
    ) {
        let mut keys: Vec<Vec<u8>> = Vec::new();
        let mut seen = HashSet::new();
        for &i in parked.iter() {
            let k = requests[i].cmd.key();
            if !sh.cache.contains(k)
                && !sh.tombstones.contains_key(k)
                && !fetched.contains_key(k)
                && seen.insert(k)
            {
                keys.push(k.to_vec());
            }
        }
        if !keys.is_empty() {
            bump(&self.counters.deferred_fetches, 1);
            match self.backend().multi_read(&keys) {
                Ok(values) => {
                    for (k, v) in keys.into_iter().zip(values) {
                        if let Some(v) = &v {
                            self.put_clean(sh, &k, v);
                        }
                        fetched.insert(k, v);
                    }
                }
                Err(e) => {
                    let err = StoreError::StorageReadFailed(e.to_string());
                    for i in parked.drain(..) {
                        replies[i] = Some(Reply::Err(err.clone()));
                    }
                    return;
                }
            }
        }
        for i in parked.drain(..) {
            replies[i] = Some(self.wb_apply(sh, &requests[i].cmd, fetched));
        }
    }

    /// Base value for a write-back update, never touching storage except for
    /// a plain existence check on `DEL`.
    fn wb_base(
        &self,
        sh: &mut SyncShard,
        key: &[u8],
        fetched: &HashMap<Vec<u8>, Option<Vec<u8>>>,
    ) -> Result<Option<Vec<u8>>, StoreError> {
        if let Some(e) = sh.cache.peek(key) {
            return self.decode(e.value.clone()).map(Some);
        }
        if sh.tombstones.contains_key(key) {
            return Ok(None);
        }
        Ok(fetched.get(key).cloned().flatten())
    }

    fn wb_apply(
        &self,
        sh: &mut SyncShard,
        cmd: &Command,
        fetched: &HashMap<Vec<u8>, Option<Vec<u8>>>,
    ) -> Reply {
        let key = cmd.key();
        let result = (|| -> Result<Reply, StoreError> {
            match cmd {
                Command::Get(_) => {
                    if let Some(v) = fetched.get(key) {
                        if !sh.cache.contains(key) && !sh.tombstones.contains_key(key) {
                            bump(&self.counters.reads, 1);
                            bump(&self.counters.hits, 1);
                            return Ok(Reply::Value(v.clone()));
                        }
                    }
                    self.read_through(sh, key).map(Reply::Value)
                }
                Command::Set(_, v) => {
                    self.write_dirty(sh, key, Some(v))?;
                    Ok(Reply::Ok)
                }
                Command::Del(_) => {
                    let existed = if sh.cache.contains(key) {
                        true
                    } else if sh.tombstones.contains_key(key) {
                        false
                    } else if let Some(v) = fetched.get(key) {
                        v.is_some()
                    } else {
                        self.backend()
                            .read(key)
                            .map_err(|e| StoreError::StorageReadFailed(e.to_string()))?
                            .is_some()
                    };
                    self.write_dirty(sh, key, None)?;
                    Ok(Reply::Integer(existed as i64))
                }
                Command::Append(..) | Command::Incr(..) => {
                    let base = self.wb_base(sh, key, fetched)?;
                    let (next, reply) = apply_update(cmd, base.as_deref())?;
                    self.write_dirty(sh, key, next.as_deref())?;
                    Ok(reply)
                }
            }
        })();
        result.unwrap_or_else(Reply::Err)
    }

    /// Flushes when the interval has elapsed or dirty data passed the high
    /// watermark.
    pub fn maybe_flush(&self) -> Option<FlushOutcome> {
        if self.config.sync.policy != SyncPolicy::WriteBack {
            return None;
        }
        let sync = &self.config.sync;
        let high = (sync.dirty_max_bytes as f64 * sync.dirty_high_watermark) as usize;
        let dirty = self.dirty_bytes.load(Ordering::Acquire);
        let due = self.last_flush.lock().elapsed() >= sync.flush_interval;
        if dirty > 0 && (due || dirty >= high) {
            Some(self.flush())
        } else {
            if due {
                *self.last_flush.lock() = Instant::now();
            }
            None
        }
    }

    /// Persists every dirty entry and tombstone in one batch. Entries are
    /// marked clean only if they were not rewritten while the batch was in
    /// flight. On storage failure everything stays dirty for the next try.
    pub fn flush(&self) -> FlushOutcome {
        if self.config.sync.policy != SyncPolicy::WriteBack {
            return FlushOutcome::default();
        }
        let _serial = self.flush_lock.lock();
        *self.last_flush.lock() = Instant::now();

        let mut batch = Vec::new();
        // (shard, key, version-or-seq, is_tombstone)
        let mut marks: Vec<(usize, Vec<u8>, u64, bool)> = Vec::new();
        for (si, shard) in self.shards.iter().enumerate() {
            let sh = shard.lock();
            for d in sh.cache.dirty_entries() {
                let raw = match self.decode(d.value) {
                    Ok(v) => v,
                    Err(e) => {
                        log::error!("skipping undecodable dirty entry: {e}");
                        continue;
                    }
                };
                batch.push(BatchOp::put(d.key.clone(), raw));
                marks.push((si, d.key, d.version, false));
            }
            for (k, t) in &sh.tombstones {
                batch.push(BatchOp::delete(k.clone()));
                marks.push((si, k.clone(), t.seq, true));
            }
        }
        if batch.is_empty() {
            return FlushOutcome::default();
        }
        bump(&self.counters.flushes, 1);
        if let Err(e) = self.backend().write_batch(&batch) {
            bump(&self.counters.flush_retries, 1);
            log::warn!("flush of {} keys failed, will retry: {e}", batch.len());
            return FlushOutcome {
                flushed: 0,
                failed: true,
            };
        }
        bump(&self.counters.flushed_keys, batch.len() as u64);
        for (si, key, ver, tomb) in marks {
            let mut sh = self.shards[si].lock();
            if tomb {
                if sh.tombstones.get(&key).is_some_and(|t| t.seq == ver) {
                    let t = sh.tombstones.remove(&key).unwrap();
                    self.dirty_bytes.fetch_sub(t.charged, Ordering::AcqRel);
                }
            } else {
                let charged = sh.cache.peek(&key).map(|e| e.charged_bytes);
                if sh.cache.mark_clean_if_version(&key, ver) {
                    self.dirty_bytes
                        .fetch_sub(charged.unwrap(), Ordering::AcqRel);
                }
            }
        }
        FlushOutcome {
            flushed: batch.len(),
            failed: false,
        }
    }

    /// Runs [`maybe_flush`](Self::maybe_flush) periodically until the handle
    /// is dropped.
    pub fn spawn_flusher(self: &Arc<Self>) -> FlusherHandle {
        let store = Arc::clone(self);
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let stop2 = stop.clone();
        let period = (self.config.sync.flush_interval / 4).max(Duration::from_millis(1));
        let handle = thread::Builder::new()
            .name("tierkv-flusher".into())
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    thread::sleep(period);
                    store.maybe_flush();
                }
                store.flush();
            })
            .expect("spawn flusher");
        FlusherHandle {
            stop,
            handle: Some(handle),
        }
    }

    pub fn dirty_bytes(&self) -> usize {
        self.dirty_bytes.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> StoreStats {
        let mut cache = CacheStats::default();
        for s in &self.shards {
            cache.merge(&s.lock().cache.stats());
        }
        StoreStats {
            sync: self.counters.snapshot(),
            cache,
            dirty_bytes: self.dirty_bytes(),
            storage: self
                .storage
                .as_ref()
                .map(|s| s.counters())
                .unwrap_or_default(),
            compression: self.codec.read().as_ref().map(|_| self.monitor.stats()),
        }
    }

    /// Every resident key with its decoded value.
    pub fn cache_snapshot(&self) -> HashMap<Vec<u8>, Vec<u8>> {
        let mut out = HashMap::new();
        for s in &self.shards {
            let sh = s.lock();
            for k in sh.cache.keys() {
                let e = sh.cache.peek(k).unwrap();
                if let Ok(v) = self.decode(e.value.clone()) {
                    out.insert(k.to_vec(), v);
                }
            }
        }
        out
    }

    /// Dirty bytes recomputed from the shards, for audits.
    pub fn recompute_dirty_bytes(&self) -> usize {
        self.shards
            .iter()
            .map(|s| {
                let sh = s.lock();
                sh.cache.recompute_bytes().1 + sh.tombstones.values().map(|t| t.charged).sum::<usize>()
            })
            .sum()
    }

    /// Clears hit/miss counters in the cache shards (for measurement
    /// windows). Store-level counters are monotone; diff snapshots instead.
    pub fn reset_cache_counters(&self) {
        for s in &self.shards {
            s.lock().cache.reset_counters();
        }
    }
}

/// Stops the background flusher (after a final flush) when dropped.
pub struct FlusherHandle {
    stop: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for FlusherHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
