//! Tiered key-value store with a space-performance cost evaluation toolkit.
//!
//! The store keeps an LRU memory tier ([`kv_core`]) in front of a pluggable
//! storage tier ([`storage`]), synchronized by write-through or write-back
//! policies ([`tier_sync`]), with optional dictionary compression of values
//! ([`compression`]) and an executor that switches between a single event
//! loop and a worker pool under load ([`elastic_exec`]).
//!
//! The evaluation side measures configurations against replayed workloads
//! ([`workload`], [`evaluator`]) and prices them with the cost model in
//! [`cost_model`], using miss-ratio curves from [`mrc`].

pub mod compression;
pub mod cost_model;
pub mod elastic_exec;
pub mod evaluator;
pub mod hash;
pub mod kv_core;
pub mod mrc;
pub mod storage;
pub mod tier_sync;
pub mod workload;
