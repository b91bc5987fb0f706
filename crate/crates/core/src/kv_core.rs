//! Cache tier: an LRU hash map with byte accounting and dirty tracking.
//!
//! Each [`CacheShard`] is a single-owner structure; [`ShardedCache`] splits
//! the key space over a power-of-two number of shards by FNV-1a hash and
//! gives each shard an equal slice of the byte budget. Recency is a
//! per-shard logical clock, so replacement is exact LRU within a shard.
//!
//! Dirty entries (written but not yet persisted) are never evicted. A put
//! that cannot be satisfied by evicting clean entries fails with
//! [`CacheError::DirtyOverflow`] and leaves the shard unchanged.

use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use thiserror::Error;

use crate::hash::fnv1a64;

/// Bytes charged per entry on top of key and value length.
pub const DEFAULT_ENTRY_OVERHEAD: usize = 64;
pub const DEFAULT_SHARDS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("entry of {needed} bytes exceeds cache capacity of {capacity} bytes")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("cannot make room: {dirty_bytes} of {capacity} bytes are dirty")]
    DirtyOverflow { dirty_bytes: usize, capacity: usize },
}

pub fn charged_bytes(key_len: usize, value_len: usize, overhead: usize) -> usize {
    key_len + value_len + overhead
}

/// A value as stored in the cache. `dict_version` is set when the bytes are
/// dictionary-encoded and names the dictionary that decodes them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredValue {
    pub bytes: Vec<u8>,
    pub dict_version: Option<u8>,
}

impl StoredValue {
    pub fn raw(bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            bytes: bytes.into(),
            dict_version: None,
        }
    }

    pub fn encoded(bytes: Vec<u8>, dict_version: u8) -> Self {
        Self {
            bytes,
            dict_version: Some(dict_version),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub value: StoredValue,
    pub dirty: bool,
    pub last_touch: u64,
    pub charged_bytes: usize,
    /// Bumped on every put; lets a flusher tell whether the entry it
    /// persisted is still the current one.
    pub version: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub bytes_used: usize,
    pub bytes_capacity: usize,
    pub dirty_bytes: usize,
    pub entries: usize,
}

impl CacheStats {
    pub fn merge(&mut self, other: &CacheStats) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.evictions += other.evictions;
        self.bytes_used += other.bytes_used;
        self.bytes_capacity += other.bytes_capacity;
        self.dirty_bytes += other.dirty_bytes;
        self.entries += other.entries;
    }

    pub fn hit_ratio(&self) -> f64 {
        let reads = self.hits + self.misses;
        if reads == 0 {
            0.0
        } else {
            self.hits as f64 / reads as f64
        }
    }
}

/// A dirty entry snapshot handed to a flusher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirtyEntry {
    pub key: Vec<u8>,
    pub value: StoredValue,
    pub version: u64,
}

#[derive(Debug)]
pub struct CacheShard {
    map: HashMap<Vec<u8>, CacheEntry>,
    /// Clean entries by last touch; dirty entries are absent from it.
    clean_lru: BTreeMap<u64, Vec<u8>>,
    clock: u64,
    next_version: u64,
    overhead: usize,
    stats: CacheStats,
}

impl CacheShard {
    pub fn new(capacity: usize) -> Self {
        Self::with_overhead(capacity, DEFAULT_ENTRY_OVERHEAD)
    }

    pub fn with_overhead(capacity: usize, overhead: usize) -> Self {
        Self {
            map: HashMap::new(),
            clean_lru: BTreeMap::new(),
            clock: 0,
            next_version: 0,
            overhead,
            stats: CacheStats {
                bytes_capacity: capacity,
                ..CacheStats::default()
            },
        }
    }

    pub fn capacity(&self) -> usize {
        self.stats.bytes_capacity
    }

    pub fn overhead(&self) -> usize {
        self.overhead
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.map.len(),
            ..self.stats
        }
    }

    pub fn reset_counters(&mut self) {
        self.stats.hits = 0;
        self.stats.misses = 0;
        self.stats.evictions = 0;
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn charge_for(&self, key_len: usize, value_len: usize) -> usize {
        charged_bytes(key_len, value_len, self.overhead)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Looks up `key`, counting a hit or miss and refreshing recency.
    pub fn get(&mut self, key: &[u8]) -> Option<StoredValue> {
        let now = self.tick();
        match self.map.get_mut(key) {
            Some(e) => {
                self.stats.hits += 1;
                if !e.dirty {
                    let k = self.clean_lru.remove(&e.last_touch).expect("clean entry in lru");
                    self.clean_lru.insert(now, k);
                }
                e.last_touch = now;
                Some(e.value.clone())
            }
            None => {
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Read without touching recency or counters.
    pub fn peek(&self, key: &[u8]) -> Option<&CacheEntry> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &[u8]> {
        self.map.keys().map(|k| k.as_slice())
    }

    /// Inserts or replaces `key`, evicting clean entries in LRU order until
    /// the shard is back within capacity. Returns the evicted keys.
    pub fn put(
        &mut self,
        key: &[u8],
        value: StoredValue,
        dirty: bool,
    ) -> Result<Vec<Vec<u8>>, CacheError> {
        let capacity = self.stats.bytes_capacity;
        let charged = self.charge_for(key.len(), value.bytes.len());
        if charged > capacity {
            return Err(CacheError::CapacityExceeded {
                needed: charged,
                capacity,
            });
        }

        let (old_bytes, old_clean_bytes) = match self.map.get(key) {
            Some(e) if e.dirty => (e.charged_bytes, 0),
            Some(e) => (e.charged_bytes, e.charged_bytes),
            None => (0, 0),
        };
        let used_after_removal = self.stats.bytes_used - old_bytes;
        let clean_after_removal =
            self.stats.bytes_used - self.stats.dirty_bytes - old_clean_bytes;
        let need_free = (used_after_removal + charged).saturating_sub(capacity);
        if need_free > clean_after_removal {
            return Err(CacheError::DirtyOverflow {
                dirty_bytes: self.stats.dirty_bytes,
                capacity,
            });
        }

        self.remove_entry(key);
        let now = self.tick();
        self.next_version += 1;
        let entry = CacheEntry {
            value,
            dirty,
            last_touch: now,
            charged_bytes: charged,
            version: self.next_version,
        };
        self.stats.bytes_used += charged;
        if dirty {
            self.stats.dirty_bytes += charged;
        } else {
            self.clean_lru.insert(now, key.to_vec());
        }
        self.map.insert(key.to_vec(), entry);

        let mut evicted = Vec::new();
        while self.stats.bytes_used > capacity {
            let victim = self
                .clean_lru
                .values()
                .find(|k| k.as_slice() != key)
                .cloned()
                .expect("feasibility checked above");
            self.remove_entry(&victim);
            self.stats.evictions += 1;
            evicted.push(victim);
        }
        Ok(evicted)
    }

    fn remove_entry(&mut self, key: &[u8]) -> Option<CacheEntry> {
        let e = self.map.remove(key)?;
        self.stats.bytes_used -= e.charged_bytes;
        if e.dirty {
            self.stats.dirty_bytes -= e.charged_bytes;
        } else {
            self.clean_lru.remove(&e.last_touch);
        }
        Some(e)
    }

    pub fn delete(&mut self, key: &[u8]) -> bool {
        self.remove_entry(key).is_some()
    }

    fn clean_one(&mut self, key: &[u8], version: Option<u64>) -> bool {
        let Some(e) = self.map.get_mut(key) else {
            return false;
        };
        if !e.dirty || version.is_some_and(|v| v != e.version) {
            return false;
        }
        e.dirty = false;
        self.stats.dirty_bytes -= e.charged_bytes;
        self.clean_lru.insert(e.last_touch, key.to_vec());
        true
    }

    /// Clears the dirty flag of each resident key; returns how many changed.
    pub fn mark_clean<K: AsRef<[u8]>>(&mut self, keys: &[K]) -> usize {
        keys.iter().filter(|k| self.clean_one(k.as_ref(), None)).count()
    }

    /// Like [`mark_clean`](Self::mark_clean) but only if the entry still has
    /// the given version.
    pub fn mark_clean_if_version(&mut self, key: &[u8], version: u64) -> bool {
        self.clean_one(key, Some(version))
    }

    pub fn dirty_entries(&self) -> Vec<DirtyEntry> {
        self.map
            .iter()
            .filter(|(_, e)| e.dirty)
            .map(|(k, e)| DirtyEntry {
                key: k.clone(),
                value: e.value.clone(),
                version: e.version,
            })
            .collect()
    }

    /// Sum of charged bytes recomputed from scratch; used by audits.
    pub fn recompute_bytes(&self) -> (usize, usize) {
        self.map.values().fold((0, 0), |(all, dirty), e| {
            (
                all + e.charged_bytes,
                dirty + if e.dirty { e.charged_bytes } else { 0 },
            )
        })
    }

    /// Clean keys from least to most recently used.
    pub fn lru_order(&self) -> Vec<Vec<u8>> {
        self.clean_lru.values().cloned().collect()
    }
}

/// Maps a key to one of `shards` shards (`shards` a power of two).
pub fn shard_index(key: &[u8], shards: usize) -> usize {
    debug_assert!(shards.is_power_of_two());
    (fnv1a64(key) as usize) & (shards - 1)
}

/// A cache split into independently locked shards.
#[derive(Debug)]
pub struct ShardedCache {
    shards: Vec<Mutex<CacheShard>>,
}

impl ShardedCache {
    /// `capacity` is the total byte budget, divided evenly across shards.
    pub fn new(capacity: usize, shards: usize) -> Self {
        Self::with_overhead(capacity, shards, DEFAULT_ENTRY_OVERHEAD)
    }

    pub fn with_overhead(capacity: usize, shards: usize, overhead: usize) -> Self {
        assert!(shards.is_power_of_two(), "shard count must be a power of two");
        let per = capacity / shards;
        Self {
            shards: (0..shards)
                .map(|_| Mutex::new(CacheShard::with_overhead(per, overhead)))
                .collect(),
        }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_for(&self, key: &[u8]) -> usize {
        shard_index(key, self.shards.len())
    }

    pub fn with_shard<R>(&self, idx: usize, f: impl FnOnce(&mut CacheShard) -> R) -> R {
        f(&mut self.shards[idx].lock())
    }

    pub fn get(&self, key: &[u8]) -> Option<StoredValue> {
        self.with_shard(self.shard_for(key), |s| s.get(key))
    }

    pub fn put(
        &self,
        key: &[u8],
        value: StoredValue,
        dirty: bool,
    ) -> Result<Vec<Vec<u8>>, CacheError> {
        self.with_shard(self.shard_for(key), |s| s.put(key, value, dirty))
    }

    pub fn delete(&self, key: &[u8]) -> bool {
        self.with_shard(self.shard_for(key), |s| s.delete(key))
    }

    pub fn mark_clean<K: AsRef<[u8]>>(&self, keys: &[K]) -> usize {
        keys.iter()
            .filter(|k| {
                let k = k.as_ref();
                self.with_shard(self.shard_for(k), |s| s.mark_clean(&[k]) == 1)
            })
            .count()
    }

    pub fn stats(&self) -> CacheStats {
        let mut total = CacheStats::default();
        for s in &self.shards {
            total.merge(&s.lock().stats());
        }
        total
    }
}
