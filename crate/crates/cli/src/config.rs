//! Flat `section.key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected with their line number. Evaluation config
//! lists use the same syntax split into `[config_id]` blocks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tierkv_core::compression::Dictionary;
use tierkv_core::cost_model::{Headroom, InstanceSpec};
use tierkv_core::elastic_exec::{ElasticConfig, Mode};
use tierkv_core::evaluator::{BackendSpec, EvalConfig, StorageTierSpec, StoreBundle};
use tierkv_core::storage::{LogBackend, SimulatedBackend, StorageBackend};
use tierkv_core::tier_sync::{StoreConfig, SyncConfig, SyncPolicy, TieredStore};

pub const CONFIG_ENV: &str = "TIERKV_CONFIG";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

/// A parsed value with the line it came from.
#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

/// `key = value` pairs checked against an allow-list.
#[derive(Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a).trim()
}

impl RawConfig {
    pub fn parse(text: &str, known: &[&str]) -> Result<Self, ConfigError> {
        Self::parse_lines(text.lines().enumerate().map(|(i, l)| (i + 1, l)), known)
    }

    fn parse_lines<'a>(
        lines: impl Iterator<Item = (usize, &'a str)>,
        known: &[&str],
    ) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (line, raw) in lines {
            let text = strip_comment(raw);
            if text.is_empty() {
                continue;
            }
            let (k, v) = text.split_once('=').ok_or(ConfigError::Malformed { line })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Malformed { line });
            }
            if !known.contains(&k) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.to_string(),
                });
            }
            if entries.contains_key(k) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: k.to_string(),
                });
            }
            entries.insert(
                k.to_string(),
                Entry {
                    line,
                    value: v.to_string(),
                },
            );
        }
        Ok(Self { entries })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn bad(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line: self.entries.get(key).map_or(0, |e| e.line),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| self.bad(key, e.to_string())),
        }
    }

    pub fn get_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get_str(key)
            .map(|v| v.parse().map_err(|e: T::Err| self.bad(key, e.to_string())))
            .transpose()
    }

    fn policy(&self, key: &str, default: SyncPolicy) -> Result<SyncPolicy, ConfigError> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => SyncPolicy::parse(v)
                .ok_or_else(|| self.bad(key, "expected write-through, write-back or memory")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendChoice {
    Simulated { read_us: u64, write_us: u64 },
    Log(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecSetting {
    Single,
    Multi,
    Elastic,
}

/// Everything `serve` and in-process `replay` need.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub max_connections: usize,
    pub store: StoreConfig,
    pub backend: BackendChoice,
    pub dictionary: Option<PathBuf>,
    pub exec: ExecSetting,
    pub elastic: ElasticConfig,
}

pub const SERVER_KEYS: &[&str] = &[
    "server.listen",
    "server.max_connections",
    "cache.capacity_bytes",
    "cache.shards",
    "cache.entry_overhead",
    "sync.policy",
    "sync.flush_interval_ms",
    "sync.dirty_max_bytes",
    "sync.dirty_high_watermark",
    "sync.deferred_fetch_batch",
    "sync.replica_factor",
    "storage.backend",
    "storage.path",
    "storage.read_latency_us",
    "storage.write_latency_us",
    "compression.dictionary",
    "exec.mode",
    "exec.threads_max",
    "exec.qps_high_watermark",
    "exec.qps_low_watermark",
    "exec.cooldown_s",
];

impl Default for ServerConfig {
    fn default() -> Self {
        Self::from_text("").expect("defaults are valid")
    }
}

impl ServerConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let raw = RawConfig::parse(text, SERVER_KEYS)?;
        let policy = raw.policy("sync.policy", SyncPolicy::WriteThrough)?;
        let defaults = SyncConfig::new(policy);
        let sync = SyncConfig {
            policy,
            flush_interval: Duration::from_millis(raw.get("sync.flush_interval_ms", 200u64)?),
            dirty_max_bytes: raw.get("sync.dirty_max_bytes", defaults.dirty_max_bytes)?,
            dirty_high_watermark: raw.get("sync.dirty_high_watermark", defaults.dirty_high_watermark)?,
            deferred_fetch_batch: raw.get("sync.deferred_fetch_batch", defaults.deferred_fetch_batch)?,
            replica_factor: raw.get("sync.replica_factor", defaults.replica_factor)?,
        };
        if policy == SyncPolicy::WriteBack && sync.dirty_max_bytes == 0 {
            return Err(raw.bad("sync.dirty_max_bytes", "must be positive for write-back"));
        }
        let shards: usize = raw.get("cache.shards", 16)?;
        if !shards.is_power_of_two() {
            return Err(raw.bad("cache.shards", "must be a power of two"));
        }
        let store = StoreConfig {
            cache_capacity: raw.get("cache.capacity_bytes", 64usize << 20)?,
            shards,
            entry_overhead: raw.get("cache.entry_overhead", 64)?,
            sync,
        };
        let backend = match raw.get_str("storage.backend").unwrap_or("simulated") {
            "simulated" => BackendChoice::Simulated {
                read_us: raw.get("storage.read_latency_us", 0)?,
                write_us: raw.get("storage.write_latency_us", 0)?,
            },
            "log" => BackendChoice::Log(
                raw.get_opt::<PathBuf>("storage.path")?
                    .ok_or_else(|| ConfigError::Invalid("storage.backend = log needs storage.path".into()))?,
            ),
            _ => return Err(raw.bad("storage.backend", "expected simulated or log")),
        };
        let exec = match raw.get_str("exec.mode").unwrap_or("single") {
            "single" => ExecSetting::Single,
            "multi" => ExecSetting::Multi,
            "elastic" => ExecSetting::Elastic,
            _ => return Err(raw.bad("exec.mode", "expected single, multi or elastic")),
        };
        let threads_max: usize = raw.get("exec.threads_max", 4)?;
        let elastic = ElasticConfig {
            threads_max,
            qps_high_watermark: raw.get("exec.qps_high_watermark", 100_000.0)?,
            qps_low_watermark: raw.get("exec.qps_low_watermark", 50_000.0)?,
            cooldown: Duration::from_secs_f64(raw.get("exec.cooldown_s", 5.0)?),
            window_len: 2,
            sample_period: Duration::from_secs(1),
        };
        if exec != ExecSetting::Single {
            elastic.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(Self {
            listen: raw.get("server.listen", "127.0.0.1:7379".to_string())?,
            max_connections: raw.get("server.max_connections", 1024)?,
            store,
            backend,
            dictionary: raw.get_opt("compression.dictionary")?,
            exec,
            elastic,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Loads `path`, else the file named by `TIERKV_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn initial_mode(&self) -> Mode {
        match self.exec {
            ExecSetting::Multi => Mode::Multi(self.elastic.threads_max),
            _ => Mode::Single,
        }
    }

    /// Builds the store this configuration describes.
    pub fn build_store(&self) -> Result<Arc<TieredStore>, ConfigError> {
        let storage: Option<Arc<dyn StorageBackend>> = match self.store.sync.policy {
            SyncPolicy::MemoryOnly => None,
            _ => Some(match &self.backend {
                BackendChoice::Simulated { read_us, write_us } => {
                    let b = SimulatedBackend::new();
                    b.set_latency(*read_us, *write_us);
                    Arc::new(b)
                }
                BackendChoice::Log(path) => Arc::new(
                    LogBackend::open(path).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ),
            }),
        };
        let store = Arc::new(TieredStore::new(self.store.clone(), storage));
        if let Some(path) = &self.dictionary {
            let dict = Dictionary::load(path).map_err(|e| ConfigError::Io {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
            store.install_dictionary(Arc::new(dict), 1.0);
        }
        Ok(store)
    }
}

pub const EVAL_KEYS: &[&str] = &[
    "policy",
    "cache_ratio",
    "shards",
    "dictionary",
    "exec.mode",
    "exec.threads",
    "backend",
    "backend.path",
    "backend.read_latency_us",
    "backend.write_latency_us",
    "instance.cost",
    "instance.cores",
    "instance.memory_bytes",
    "storage.cost",
    "storage.capacity_bytes",
    "storage.max_qps",
    "slo_p99_us",
    "headroom.perf",
    "headroom.space",
    "sync.dirty_max_bytes",
    "sync.flush_interval_ms",
    "sync.replica_factor",
];

/// Parses `[config_id]` blocks of evaluation settings.
pub fn parse_eval_configs(text: &str) -> Result<Vec<EvalConfig>, ConfigError> {
    let mut blocks: Vec<(usize, String, Vec<(usize, &str)>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = strip_comment(raw);
        if let Some(id) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let id = id.trim();
            if id.is_empty() || id.contains(',') || id.contains(char::is_whitespace) {
                return Err(ConfigError::Malformed { line });
            }
            blocks.push((line, id.to_string(), Vec::new()));
        } else if !t.is_empty() {
            match blocks.last_mut() {
                Some(b) => b.2.push((line, raw)),
                None => return Err(ConfigError::Malformed { line }),
            }
        }
    }
    if blocks.is_empty() {
        return Err(ConfigError::Invalid("no [config] blocks".into()));
    }
    blocks
        .into_iter()
        .map(|(line, id, lines)| eval_block(line, id, RawConfig::parse_lines(lines.into_iter(), EVAL_KEYS)?))
        .collect()
}

fn eval_block(line: usize, id: String, raw: RawConfig) -> Result<EvalConfig, ConfigError> {
    let policy = raw.policy("policy", SyncPolicy::MemoryOnly)?;
    let mut bundle = if policy == SyncPolicy::MemoryOnly {
        StoreBundle::memory_only()
    } else {
        StoreBundle::tiered(policy, raw.get("cache_ratio", 0.2)?)
    };
    bundle.shards = raw.get("shards", bundle.shards)?;
    if let Some(path) = raw.get_opt::<PathBuf>("dictionary")? {
        let dict = Dictionary::load(&path).map_err(|e| raw.bad("dictionary", e.to_string()))?;
        bundle.dictionary = Some(Arc::new(dict));
    }
    let threads: usize = raw.get("exec.threads", 4)?;
    bundle.exec_mode = match raw.get_str("exec.mode").unwrap_or("single") {
        "single" => Mode::Single,
        "multi" => Mode::Multi(threads),
        _ => return Err(raw.bad("exec.mode", "expected single or multi")),
    };
    bundle.backend = match raw.get_str("backend").unwrap_or("simulated") {
        "simulated" => BackendSpec::Simulated {
            read_latency_us: raw.get("backend.read_latency_us", 0)?,
            write_latency_us: raw.get("backend.write_latency_us", 0)?,
        },
        "log" => BackendSpec::Log {
            dir: raw.get("backend.path", std::env::temp_dir())?,
        },
        _ => return Err(raw.bad("backend", "expected simulated or log")),
    };
    bundle.sync.dirty_max_bytes = raw.get("sync.dirty_max_bytes", bundle.sync.dirty_max_bytes)?;
    bundle.sync.flush_interval = Duration::from_millis(
        raw.get("sync.flush_interval_ms", bundle.sync.flush_interval.as_millis() as u64)?,
    );
    bundle.sync.replica_factor = raw.get("sync.replica_factor", bundle.sync.replica_factor)?;

    let instance = InstanceSpec::new(
        raw.get("instance.cost", 1.0)?,
        raw.get("instance.cores", 1)?,
        raw.get("instance.memory_bytes", 256u64 << 20)?,
    )
    .map_err(|e| raw.bad("instance.cost", e.to_string()))?;
    let storage_tier = match raw.get_opt::<f64>("storage.cost")? {
        Some(cost) => Some(StorageTierSpec {
            cost,
            capacity_bytes: raw.get("storage.capacity_bytes", 1e12)?,
            max_qps: raw.get("storage.max_qps", 10_000.0)?,
        }),
        None => None,
    };
    let headroom = Headroom::new(raw.get("headroom.perf", 0.85)?, raw.get("headroom.space", 0.85)?)
        .map_err(|e| raw.bad("headroom.perf", e.to_string()))?;
    let cfg = EvalConfig {
        config_id: id,
        store: bundle,
        instance,
        storage_tier,
        slo_p99_us: raw.get("slo_p99_us", 10_000.0)?,
        headroom,
    };
    cfg.validate()
        .map_err(|e| ConfigError::Invalid(format!("block at line {line}: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ServerConfig::default();
        assert_eq!(c.listen, "127.0.0.1:7379");
        assert_eq!(c.store.sync.policy, SyncPolicy::WriteThrough);
        assert_eq!(c.store.sync.deferred_fetch_batch, 64);
        assert_eq!(c.store.sync.flush_interval, Duration::from_millis(200));
    }

    #[test]
    fn parses_values_and_comments() {
        let c = ServerConfig::from_text(
            "# comment\n\nsync.policy = write-back  # trailing\nsync.dirty_max_bytes=4096\ncache.shards = 4\n",
        )
        .unwrap();
        assert_eq!(c.store.sync.policy, SyncPolicy::WriteBack);
        assert_eq!(c.store.sync.replica_factor, 2.0);
        assert_eq!(c.store.sync.dirty_max_bytes, 4096);
        assert_eq!(c.store.shards, 4);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            ServerConfig::from_text("cache.shards = 4\n\nbogus.key = 1\n").unwrap_err(),
            ConfigError::UnknownKey {
                line: 3,
                key: "bogus.key".into()
            }
        );
        assert_eq!(
            ServerConfig::from_text("cache.shards 4").unwrap_err(),
            ConfigError::Malformed { line: 1 }
        );
        assert!(matches!(
            ServerConfig::from_text("x=1\n").unwrap_err(),
            ConfigError::UnknownKey { line: 1, .. }
        ));
        assert!(matches!(
            ServerConfig::from_text("\ncache.shards = three").unwrap_err(),
            ConfigError::BadValue { line: 2, .. }
        ));
        assert!(matches!(
            ServerConfig::from_text("cache.shards = 3").unwrap_err(),
            ConfigError::BadValue { line: 1, .. }
        ));
    }

    #[test]
    fn eval_blocks() {
        let cfgs = parse_eval_configs(
            "[mem]\ninstance.cost = 2\n\n[wb]\npolicy = write-back\ncache_ratio = 0.25\nstorage.cost = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0].instance.cost, 2.0);
        assert!(cfgs[1].is_tiered());
        assert_eq!(cfgs[1].store.sync.replica_factor, 2.0);
        assert_eq!(
            parse_eval_configs("[a]\nnope = 1\n").unwrap_err(),
            ConfigError::UnknownKey {
                line: 2,
                key: "nope".into()
            }
        );
        assert!(parse_eval_configs("[wb]\npolicy = write-back\n").is_err());
    }
}
