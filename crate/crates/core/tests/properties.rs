use std::collections::{HashMap, VecDeque};
use std::fs::OpenOptions;
use std::sync::Arc;

use proptest::prelude::*;
use tierkv_core::compression::{Codec, Dictionary};
use tierkv_core::cost_model::{break_even_interval, select_optimal_config, tiered_cost, ConfigCost, TieredCostParams};
use tierkv_core::elastic_exec::{Executor, Mode};
use tierkv_core::kv_core::{charged_bytes, CacheShard, StoredValue};
use tierkv_core::mrc::stack_distance_histogram;
use tierkv_core::storage::{BatchOp, LogBackend, SimulatedBackend, StorageBackend};
use tierkv_core::tier_sync::{Command, Reply, Request, StoreConfig, SyncPolicy, TieredStore};
use tierkv_core::workload::{read_trace_from, write_trace_to, Trace, TraceOp, TraceRecord};

fn costs() -> impl Strategy<Value = Vec<(u8, u8)>> {
    prop::collection::vec((0u8..10, 0u8..10), 1..20)
}

#[derive(Debug, Clone)]
enum Op {
    Get(u8),
    Set(u8, Vec<u8>),
    Del(u8),
}

fn ops(keys: u8, n: usize) -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0..keys).prop_map(Op::Get),
        ((0..keys), prop::collection::vec(any::<u8>(), 0..40)).prop_map(|(k, v)| Op::Set(k, v)),
        (0..keys).prop_map(Op::Del),
    ];
    prop::collection::vec(op, 1..n)
}

fn key(k: u8) -> Vec<u8> {
    format!("key{k}").into_bytes()
}

fn command(op: &Op) -> Command {
    match op {
        Op::Get(k) => Command::Get(key(*k)),
        Op::Set(k, v) => Command::Set(key(*k), v.clone()),
        Op::Del(k) => Command::Del(key(*k)),
    }
}

fn tiered(policy: SyncPolicy, capacity: usize, shards: usize) -> (Arc<SimulatedBackend>, TieredStore) {
    let b = Arc::new(SimulatedBackend::new());
    let cfg = StoreConfig::new(capacity, policy).with_shards(shards);
    let s = TieredStore::new(cfg, Some(b.clone() as Arc<dyn StorageBackend>));
    (b, s)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(256) })]

    #[test]
    fn selection_is_the_min_max(set in costs()) {
        let configs: Vec<ConfigCost> = set
            .iter()
            .enumerate()
            .map(|(i, (p, s))| ConfigCost::new(i.to_string(), *p as f64, *s as f64))
            .collect();
        let got = select_optimal_config(&configs).unwrap();
        let best = configs.iter().map(ConfigCost::total).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got.total(), best);
        let first = configs
            .iter()
            .filter(|c| c.total() == best)
            .min_by(|a, b| a.imbalance().total_cmp(&b.imbalance()))
            .unwrap();
        prop_assert_eq!(&got.config_id, &first.config_id);
    }

    #[test]
    fn tiered_cost_grows_with_misses_and_cache(
        pc_cache in 0.0..10.0f64, pc_miss in 0.0..10.0f64, pc_storage in 0.0..10.0f64,
        sc_cache in 0.0..10.0f64, sc_storage in 0.0..10.0f64,
        cr in 0.0..1.0f64, mr in 0.0..1.0f64, dcr in 0.0..1.0f64, dmr in 0.0..1.0f64,
    ) {
        let p = TieredCostParams { pc_cache, pc_miss, pc_storage, sc_cache, sc_storage, cr, mr };
        let base = tiered_cost(&p);
        prop_assert!(base >= 0.0);
        let more_misses = TieredCostParams { mr: (mr + dmr).min(1.0), ..p };
        let more_cache = TieredCostParams { cr: (cr + dcr).min(1.0), ..p };
        prop_assert!(tiered_cost(&more_misses) >= base);
        prop_assert!(tiered_cost(&more_cache) >= base);
    }

    #[test]
    fn break_even_scales(cpqps in 1e-9..1.0f64, cpgb in 1e-6..10.0f64, size in 1.0..1e6f64, k in 0.1..100.0f64) {
        let base = break_even_interval(cpqps, cpgb, size).unwrap().seconds;
        let both = break_even_interval(cpqps * k, cpgb * k, size).unwrap().seconds;
        let bigger = break_even_interval(cpqps, cpgb, size * k).unwrap().seconds;
        prop_assert!((both - base).abs() <= 1e-12 * base);
        prop_assert!((bigger * k - base).abs() <= 1e-12 * base);
    }

    /// The cache shard's LRU, charged with equal-size entries, misses
    /// exactly where the stack-distance histogram says it will.
    #[test]
    fn shard_lru_matches_stack_distances(trace in prop::collection::vec(0u8..40, 1..400), size in 0usize..45) {
        let charge = charged_bytes(5, 1, 64);
        let mut shard = CacheShard::with_overhead(size * charge, 64);
        let mut misses = 0u64;
        for k in &trace {
            let name = format!("k{k:04}");
            if shard.get(name.as_bytes()).is_none() {
                misses += 1;
                shard.put(name.as_bytes(), StoredValue::raw(vec![0u8]), false).unwrap_or_default();
            }
        }
        let hist = stack_distance_histogram(trace.iter().copied());
        prop_assert_eq!(hist.misses_at(size), misses);
        prop_assert!(hist.misses_at(size + 1) <= misses);
    }

    #[test]
    fn shard_accounting_matches_reference(
        steps in prop::collection::vec((0u8..30, prop::option::of(0usize..200), any::<bool>()), 1..300),
        capacity in 0usize..4000,
    ) {
        let mut shard = CacheShard::with_overhead(capacity, 16);
        // reference: recency queue of resident keys, front is least recent
        let mut lru: VecDeque<Vec<u8>> = VecDeque::new();
        let mut sizes: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut dirty_keys: HashMap<Vec<u8>, bool> = HashMap::new();
        for (k, value_len, dirty) in steps {
            let k = key(k);
            match value_len {
                Some(n) => {
                    let charge = charged_bytes(k.len(), n, 16);
                    let result = shard.put(&k, StoredValue::raw(vec![1u8; n]), dirty);
                    if charge > capacity {
                        prop_assert!(result.is_err());
                        continue;
                    }
                    let pinned: usize = sizes
                        .iter()
                        .filter(|(x, _)| **x != k && dirty_keys[*x])
                        .map(|(_, c)| c)
                        .sum();
                    let Ok(evicted) = result else {
                        // refused only when dirty entries fill the shard
                        prop_assert!(pinned + charge > capacity);
                        continue;
                    };
                    // victims are the least recent clean entries
                    let clean_order: Vec<Vec<u8>> =
                        lru.iter().filter(|x| **x != k && !dirty_keys[*x]).cloned().collect();
                    prop_assert_eq!(&evicted[..], &clean_order[..evicted.len()]);
                    lru.retain(|x| *x != k);
                    sizes.insert(k.clone(), charge);
                    dirty_keys.insert(k.clone(), dirty);
                    lru.push_back(k);
                    for gone in evicted {
                        lru.retain(|x| *x != gone);
                        sizes.remove(&gone);
                        dirty_keys.remove(&gone);
                    }
                }
                None => {
                    let present = shard.delete(&k);
                    prop_assert_eq!(present, sizes.remove(&k).is_some());
                    dirty_keys.remove(&k);
                    lru.retain(|x| *x != k);
                }
            }
            let stats = shard.stats();
            prop_assert_eq!(stats.bytes_used, sizes.values().sum::<usize>());
            prop_assert!(stats.bytes_used <= capacity);
            prop_assert_eq!(stats.entries, lru.len());
            let dirty_bytes: usize = sizes.iter().filter(|(x, _)| dirty_keys[*x]).map(|(_, c)| c).sum();
            prop_assert_eq!(stats.dirty_bytes, dirty_bytes);
            prop_assert_eq!(shard.recompute_bytes(), (stats.bytes_used, stats.dirty_bytes));
            let clean: Vec<Vec<u8>> = lru.iter().filter(|x| !dirty_keys[*x]).cloned().collect();
            prop_assert_eq!(shard.lru_order(), clean);
        }
    }

    #[test]
    fn log_survives_reopen_and_compaction(batches in prop::collection::vec(ops(12, 8), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        let log = LogBackend::open(&path).unwrap();
        let mut model: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
        for batch in &batches {
            let ops: Vec<BatchOp> = batch
                .iter()
                .filter_map(|op| match op {
                    Op::Set(k, v) => {
                        model.insert(key(*k), v.clone());
                        Some(BatchOp::put(key(*k), v.clone()))
                    }
                    Op::Del(k) => {
                        model.remove(&key(*k));
                        Some(BatchOp::delete(key(*k)))
                    }
                    Op::Get(_) => None,
                })
                .collect();
            log.write_batch(&ops).unwrap();
        }
        log.flush().unwrap();
        prop_assert_eq!(&log.snapshot().unwrap(), &model);
        drop(log);
        let log = LogBackend::open(&path).unwrap();
        prop_assert_eq!(&log.snapshot().unwrap(), &model);
        log.compact().unwrap();
        prop_assert_eq!(log.compact().unwrap(), 0);
        prop_assert_eq!(log.live_keys(), model.len());
        drop(log);
        let log = LogBackend::open(&path).unwrap();
        prop_assert_eq!(&log.snapshot().unwrap(), &model);
    }

    /// A log cut at any byte recovers the state after some prefix of the
    /// writes, never a mix.
    #[test]
    fn torn_log_recovers_a_prefix(writes in ops(6, 30), cut in 0.0..1.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        let log = LogBackend::open(&path).unwrap();
        let mut states = vec![HashMap::new()];
        for op in &writes {
            let mut next: HashMap<Vec<u8>, Vec<u8>> = states.last().unwrap().clone();
            let batch = match op {
                Op::Set(k, v) => {
                    next.insert(key(*k), v.clone());
                    BatchOp::put(key(*k), v.clone())
                }
                Op::Del(k) => {
                    next.remove(&key(*k));
                    BatchOp::delete(key(*k))
                }
                Op::Get(_) => continue,
            };
            log.write_batch(&[batch]).unwrap();
            states.push(next);
        }
        log.flush().unwrap();
        let len = log.log_len();
        drop(log);
        OpenOptions::new().write(true).open(&path).unwrap().set_len((len as f64 * cut) as u64).unwrap();
        let log = LogBackend::open(&path).unwrap();
        let got = log.snapshot().unwrap();
        prop_assert!(states.contains(&got));
    }

    #[test]
    fn codec_round_trips(
        patterns in prop::collection::vec(prop::collection::vec(0u8..4, 4..12), 0..20),
        records in prop::collection::vec(prop::collection::vec(0u8..6, 0..120), 1..20),
        noise in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let mut patterns = patterns;
        patterns.sort();
        patterns.dedup();
        let min = patterns.iter().map(Vec::len).min().unwrap_or(4);
        let dict = Dictionary { version: 3, patterns, min_pattern_len: min, trained_on: 0 };
        let codec = Codec::new(Arc::new(dict));
        for r in records.iter().chain(std::iter::once(&noise)) {
            let enc = codec.compress(r);
            prop_assert_eq!(codec.decompress(&enc.bytes).unwrap(), r.clone());
        }
    }

    #[test]
    fn trace_round_trips(
        recs in prop::collection::vec(
            (0u64..1000, 0u8..3, "[a-z0-9:_]{1,20}", prop::collection::vec(any::<u8>(), 0..50)),
            0..50,
        ),
    ) {
        let mut ts = 0;
        let records: Vec<TraceRecord> = recs
            .into_iter()
            .map(|(dt, kind, key, v)| {
                ts += dt;
                let op = match kind {
                    0 => TraceOp::Get,
                    1 => TraceOp::Set(v),
                    _ => TraceOp::Del,
                };
                TraceRecord { ts_us: ts, op, key }
            })
            .collect();
        let trace = Trace { records };
        let mut buf = Vec::new();
        write_trace_to(&trace, &mut buf).unwrap();
        let back = read_trace_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.records, trace.records);
    }

    /// Without faults a write-through store behaves like a map, and storage
    /// always holds exactly what was acknowledged.
    #[test]
    fn write_through_is_a_map(seq in ops(24, 200), shards in prop::sample::select(vec![1usize, 2, 8])) {
        let (backend, store) = tiered(SyncPolicy::WriteThrough, 8 * charged_bytes(5, 40, 64), shards);
        let mut model: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
        for op in &seq {
            let reply = store.execute(0, command(op));
            match op {
                Op::Get(k) => prop_assert_eq!(reply, Reply::Value(model.get(&key(*k)).cloned())),
                Op::Set(k, v) => {
                    prop_assert_eq!(reply, Reply::Ok);
                    model.insert(key(*k), v.clone());
                }
                Op::Del(k) => {
                    let existed = model.remove(&key(*k)).is_some();
                    prop_assert_eq!(reply, Reply::Integer(existed as i64));
                }
            }
            prop_assert_eq!(&backend.snapshot(), &model);
        }
    }

    /// Write-back reads see every acknowledged write, and storage converges
    /// to the same map once flushed, whatever the flush points.
    #[test]
    fn write_back_converges(seq in ops(24, 200), flush_every in 1usize..50) {
        let (backend, store) = tiered(SyncPolicy::WriteBack, 1 << 16, 4);
        let mut model: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
        for (i, op) in seq.iter().enumerate() {
            let reply = store.execute(i as u64 % 3, command(op));
            match op {
                Op::Get(k) => prop_assert_eq!(reply, Reply::Value(model.get(&key(*k)).cloned())),
                Op::Set(k, v) => {
                    prop_assert_eq!(reply, Reply::Ok);
                    model.insert(key(*k), v.clone());
                }
                Op::Del(k) => {
                    let existed = model.remove(&key(*k)).is_some();
                    prop_assert_eq!(reply, Reply::Integer(existed as i64));
                }
            }
            if i % flush_every == 0 {
                prop_assert!(!store.flush().failed);
            }
        }
        store.flush();
        prop_assert_eq!(store.dirty_bytes(), 0);
        prop_assert_eq!(&backend.snapshot(), &model);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]

    /// Routing through the executor changes nothing about the answers.
    #[test]
    fn executor_preserves_per_key_order(seq in ops(16, 120), workers in 0usize..4) {
        let mode = if workers < 2 { Mode::Single } else { Mode::Multi(workers) };
        let (_, direct) = tiered(SyncPolicy::WriteThrough, 1 << 16, 4);
        let (_, routed) = tiered(SyncPolicy::WriteThrough, 1 << 16, 4);
        let exec = Executor::start(Arc::new(routed), mode);
        let want: Vec<Reply> = seq.iter().map(|op| direct.execute(0, command(op))).collect();
        let got = exec
            .call_many(seq.iter().map(|op| Request::new(0, command(op))).collect())
            .unwrap();
        exec.shutdown();
        prop_assert_eq!(got, want);
    }
}
