//! Pluggable storage tier.
//!
//! [`StorageBackend`] is the contract the cache tier talks to. Two
//! implementations ship here: [`LogBackend`], a durable append-only log with
//! an in-memory index, and [`SimulatedBackend`], an in-memory map with
//! configurable latency and fault injection.
//!
//! Log record layout (all integers little-endian):
//!
//! ```text
//! u32 total_len | u8 type (1=put, 2=tombstone) | u16 key_len | key | value | u32 crc32c
//! ```
//!
//! `total_len` covers the whole record including itself and the checksum;
//! the CRC32C covers every byte before it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

const REC_PUT: u8 = 1;
const REC_TOMBSTONE: u8 = 2;
const HEADER_LEN: usize = 4 + 1 + 2;
const CRC_LEN: usize = 4;
const MIN_RECORD: usize = HEADER_LEN + CRC_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error("storage i/o failure: {0}")]
    IoFailure(String),
    #[error("checksum mismatch in record at offset {offset}")]
    ChecksumMismatch { offset: u64 },
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
}

impl From<io::Error> for StorageError {
    fn from(e: io::Error) -> Self {
        StorageError::IoFailure(e.to_string())
    }
}

/// One mutation in a batch: a put, or a tombstone when `value` is `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOp {
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
}

impl BatchOp {
    pub fn put(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Self {
            key: key.into(),
            value: Some(value.into()),
        }
    }

    pub fn delete(key: impl Into<Vec<u8>>) -> Self {
        Self {
            key: key.into(),
            value: None,
        }
    }
}

/// Monotone operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StorageCounters {
    /// Single-key `read` calls.
    pub reads: u64,
    /// `multi_read` calls.
    pub multi_reads: u64,
    /// Keys fetched across both read paths.
    pub keys_read: u64,
    /// Records written by successful batches.
    pub writes: u64,
    /// Successful `write_batch` calls.
    pub batches: u64,
    /// Failed `write_batch` calls.
    pub failed_batches: u64,
}

impl StorageCounters {
    pub fn delta(&self, earlier: &StorageCounters) -> StorageCounters {
        StorageCounters {
            reads: self.reads - earlier.reads,
            multi_reads: self.multi_reads - earlier.multi_reads,
            keys_read: self.keys_read - earlier.keys_read,
            writes: self.writes - earlier.writes,
            batches: self.batches - earlier.batches,
            failed_batches: self.failed_batches - earlier.failed_batches,
        }
    }
}

#[derive(Debug, Default)]
struct AtomicCounters {
    reads: AtomicU64,
    multi_reads: AtomicU64,
    keys_read: AtomicU64,
    writes: AtomicU64,
    batches: AtomicU64,
    failed_batches: AtomicU64,
}

impl AtomicCounters {
    fn snapshot(&self) -> StorageCounters {
        StorageCounters {
            reads: self.reads.load(Ordering::Relaxed),
            multi_reads: self.multi_reads.load(Ordering::Relaxed),
            keys_read: self.keys_read.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            batches: self.batches.load(Ordering::Relaxed),
            failed_batches: self.failed_batches.load(Ordering::Relaxed),
        }
    }

    fn record_batch(&self, ok: bool, records: usize) {
        if ok {
            self.batches.fetch_add(1, Ordering::Relaxed);
            self.writes.fetch_add(records as u64, Ordering::Relaxed);
        } else {
            self.failed_batches.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// The storage-tier contract.
///
/// Reads may run concurrently with each other and with a batch; a batch is
/// applied atomically, so a reader sees either none or all of it. Within a
/// batch, the last operation on a key wins.
pub trait StorageBackend: Send + Sync {
    fn read(&self, key: &[u8]) -> Result<Option<Vec<u8>>, StorageError>;
    fn multi_read(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>, StorageError>;
    fn write_batch(&self, batch: &[BatchOp]) -> Result<(), StorageError>;
    fn flush(&self) -> Result<(), StorageError>;
    fn counters(&self) -> StorageCounters;
}

pub fn validate_key(key: &[u8]) -> Result<(), StorageError> {
    if key.is_empty() {
        return Err(StorageError::InvalidKey("empty key"));
    }
    if key.len() > u16::MAX as usize {
        return Err(StorageError::InvalidKey("key longer than 65535 bytes"));
    }
    if key.contains(&b'\n') {
        return Err(StorageError::InvalidKey("key contains a newline"));
    }
    Ok(())
}

fn validate_batch(batch: &[BatchOp]) -> Result<(), StorageError> {
    batch.iter().try_for_each(|op| validate_key(&op.key))
}

/// Encodes one log record.
pub fn encode_record(op: &BatchOp, out: &mut Vec<u8>) {
    let value = op.value.as_deref().unwrap_or(&[]);
    let total = MIN_RECORD + op.key.len() + value.len();
    let start = out.len();
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.push(if op.value.is_some() { REC_PUT } else { REC_TOMBSTONE });
    out.extend_from_slice(&(op.key.len() as u16).to_le_bytes());
    out.extend_from_slice(&op.key);
    out.extend_from_slice(value);
    let crc = crc32c::crc32c(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Why a byte range failed to decode as a record.
#[derive(Debug, PartialEq, Eq)]
enum DecodeFailure {
    /// Not enough bytes for the declared length.
    Truncated,
    /// Length or type field is implausible, or the checksum does not match.
    Corrupt,
}

/// Decodes the record at the start of `buf`.
fn decode_record(buf: &[u8]) -> Result<(BatchOp, usize), DecodeFailure> {
    if buf.len() < 4 {
        return Err(DecodeFailure::Truncated);
    }
    let total = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if total < MIN_RECORD {
        return Err(DecodeFailure::Corrupt);
    }
    if buf.len() < total {
        return Err(DecodeFailure::Truncated);
    }
    let rec = &buf[..total];
    let stored = u32::from_le_bytes(rec[total - CRC_LEN..].try_into().unwrap());
    if crc32c::crc32c(&rec[..total - CRC_LEN]) != stored {
        return Err(DecodeFailure::Corrupt);
    }
    let kind = rec[4];
    let key_len = u16::from_le_bytes(rec[5..7].try_into().unwrap()) as usize;
    if HEADER_LEN + key_len + CRC_LEN > total {
        return Err(DecodeFailure::Corrupt);
    }
    let key = rec[HEADER_LEN..HEADER_LEN + key_len].to_vec();
    let value = rec[HEADER_LEN + key_len..total - CRC_LEN].to_vec();
    let op = match kind {
        REC_PUT => BatchOp::put(key, value),
        REC_TOMBSTONE if value.is_empty() => BatchOp::delete(key),
        _ => return Err(DecodeFailure::Corrupt),
    };
    Ok((op, total))
}

/// Where a live key's latest record sits in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RecordLoc {
    offset: u64,
    len: u32,
}

#[derive(Debug)]
struct LogInner {
    file: File,
    index: HashMap<Vec<u8>, RecordLoc>,
    end: u64,
}

/// Durable append-only log backend.
#[derive(Debug)]
pub struct LogBackend {
    path: PathBuf,
    inner: RwLock<LogInner>,
    counters: AtomicCounters,
}

/// Result of scanning a log file from the start.
struct Recovered {
    index: HashMap<Vec<u8>, RecordLoc>,
    valid_len: u64,
    records: u64,
}

fn scan_log(path: &Path) -> Result<Recovered, StorageError> {
    let mut buf = Vec::new();
    match File::open(path) {
        Ok(f) => {
            BufReader::new(f).read_to_end(&mut buf)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    let mut index = HashMap::new();
    let mut pos = 0usize;
    let mut records = 0;
    while pos < buf.len() {
        match decode_record(&buf[pos..]) {
            Ok((op, len)) => {
                match op.value {
                    Some(_) => {
                        index.insert(
                            op.key,
                            RecordLoc {
                                offset: pos as u64,
                                len: len as u32,
                            },
                        );
                    }
                    None => {
                        index.remove(&op.key);
                    }
                }
                pos += len;
                records += 1;
            }
            Err(DecodeFailure::Truncated) => break,
            Err(DecodeFailure::Corrupt) => {
                // A bad record is only a torn tail if nothing follows it.
                let declared = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
                if declared < MIN_RECORD || pos + declared >= buf.len() {
                    break;
                }
                return Err(StorageError::ChecksumMismatch { offset: pos as u64 });
            }
        }
    }
    Ok(Recovered {
        index,
        valid_len: pos as u64,
        records,
    })
}

fn open_inner(path: &Path) -> Result<LogInner, StorageError> {
    let recovered = scan_log(path)?;
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)?;
    if file.metadata()?.len() != recovered.valid_len {
        file.set_len(recovered.valid_len)?;
    }
    Ok(LogInner {
        file,
        index: recovered.index,
        end: recovered.valid_len,
    })
}

impl LogBackend {
    /// Opens (creating if needed) the log at `path` and rebuilds the index.
    /// A trailing record that fails its length or checksum check is dropped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let path = path.as_ref().to_path_buf();
        let inner = open_inner(&path)?;
        Ok(Self {
            path,
            inner: RwLock::new(inner),
            counters: AtomicCounters::default(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Closes and reopens the log, rebuilding the index from disk.
    pub fn reopen(&self) -> Result<(), StorageError> {
        let mut inner = self.inner.write();
        inner.file.sync_data()?;
        *inner = open_inner(&self.path)?;
        Ok(())
    }

    pub fn log_len(&self) -> u64 {
        self.inner.read().end
    }

    pub fn live_keys(&self) -> usize {
        self.inner.read().index.len()
    }

    /// Number of records currently in the log file, live or not.
    pub fn record_count(&self) -> Result<u64, StorageError> {
        let _guard = self.inner.read();
        Ok(scan_log(&self.path)?.records)
    }

    /// Snapshot of every live key and value.
    pub fn snapshot(&self) -> Result<HashMap<Vec<u8>, Vec<u8>>, StorageError> {
        let inner = self.inner.read();
        inner
            .index
            .iter()
            .map(|(k, loc)| Ok((k.clone(), read_value(&inner.file, k, *loc)?)))
            .collect()
    }

    /// Rewrites the log keeping only live records. Returns bytes reclaimed.
    pub fn compact(&self) -> Result<u64, StorageError> {
        let mut inner = self.inner.write();
        let tmp = self.path.with_extension("compact");
        let mut entries: Vec<(&Vec<u8>, RecordLoc)> =
            inner.index.iter().map(|(k, l)| (k, *l)).collect();
        entries.sort_by_key(|(_, l)| l.offset);

        let mut new_index = HashMap::with_capacity(entries.len());
        let mut offset = 0u64;
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            let mut buf = Vec::new();
            for (key, loc) in entries {
                buf.resize(loc.len as usize, 0);
                inner.file.read_exact_at(&mut buf, loc.offset)?;
                out.write_all(&buf)?;
                new_index.insert(key.clone(), RecordLoc { offset, len: loc.len });
                offset += loc.len as u64;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        let reclaimed = inner.end - offset;
        inner.file = OpenOptions::new().read(true).write(true).open(&self.path)?;
        inner.index = new_index;
        inner.end = offset;
        Ok(reclaimed)
    }

    #[cfg(test)]
    fn corrupt_byte_at(&self, offset: u64) {
        let inner = self.inner.write();
        let mut b = [0u8];
        inner.file.read_exact_at(&mut b, offset).unwrap();
        b[0] ^= 0xFF;
        inner.file.write_all_at(&b, offset).unwrap();
    }
}

fn read_value(file: &File, key: &[u8], loc: RecordLoc) -> Result<Vec<u8>, StorageError> {
    let mut buf = vec![0u8; loc.len as usize];
    file.read_exact_at(&mut buf, loc.offset)?;
    match decode_record(&buf) {
        Ok((op, _)) if op.key == key => op
            .value
            .ok_or(StorageError::ChecksumMismatch { offset: loc.offset }),
        _ => Err(StorageError::ChecksumMismatch { offset: loc.offset }),
    }
}

impl StorageBackend for LogBackend {
    fn read(&self, key: &[u8]) -> Result<Option<Vec<u8>>, StorageError> {
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters.keys_read.fetch_add(1, Ordering::Relaxed);
        let inner = self.inner.read();
        match inner.index.get(key) {
            Some(loc) => read_value(&inner.file, key, *loc).map(Some),
            None => Ok(None),
        }
    }

    fn multi_read(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>, StorageError> {
        self.counters.multi_reads.fetch_add(1, Ordering::Relaxed);
        self.counters
            .keys_read
            .fetch_add(keys.len() as u64, Ordering::Relaxed);
        let inner = self.inner.read();
        keys.iter()
            .map(|k| match inner.index.get(k) {
                Some(loc) => read_value(&inner.file, k, *loc).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    fn write_batch(&self, batch: &[BatchOp]) -> Result<(), StorageError> {
        validate_batch(batch)?;
        let mut buf = Vec::new();
        let mut locs = Vec::with_capacity(batch.len());
        for op in batch {
            let start = buf.len();
            encode_record(op, &mut buf);
            locs.push((start as u64, (buf.len() - start) as u32));
        }
        let mut inner = self.inner.write();
        let base = inner.end;
        let res = inner.file.write_all_at(&buf, base);
        if let Err(e) = res {
            // Drop whatever part of the batch reached the file.
            let _ = inner.file.set_len(base);
            self.counters.record_batch(false, 0);
            return Err(e.into());
        }
        for (op, (off, len)) in batch.iter().zip(locs) {
            match op.value {
                Some(_) => {
                    inner.index.insert(
                        op.key.clone(),
                        RecordLoc {
                            offset: base + off,
                            len,
                        },
                    );
                }
                None => {
                    inner.index.remove(&op.key);
                }
            }
        }
        inner.end = base + buf.len() as u64;
        self.counters.record_batch(true, batch.len());
        Ok(())
    }

    fn flush(&self) -> Result<(), StorageError> {
        self.inner.read().file.sync_data()?;
        Ok(())
    }

    fn counters(&self) -> StorageCounters {
        self.counters.snapshot()
    }
}

/// In-memory backend with injectable latency and failures.
#[derive(Debug, Default)]
pub struct SimulatedBackend {
    map: RwLock<HashMap<Vec<u8>, Vec<u8>>>,
    read_latency_us: AtomicU64,
    write_latency_us: AtomicU64,
    fail_every: AtomicU64,
    batch_attempts: AtomicU64,
    unavailable: AtomicBool,
    counters: AtomicCounters,
    /// Serializes batches.
    write_lock: Mutex<()>,
}

impl SimulatedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Per-call latency for reads (single or multi) and for batches.
    pub fn set_latency(&self, read_us: u64, write_us: u64) {
        self.read_latency_us.store(read_us, Ordering::Relaxed);
        self.write_latency_us.store(write_us, Ordering::Relaxed);
    }

    /// Fail every `n`th batch attempt (counting from the next one); 0 disables.
    pub fn set_fail_every(&self, n: u64) {
        self.fail_every.store(n, Ordering::Relaxed);
        self.batch_attempts.store(0, Ordering::Relaxed);
    }

    /// While set, every read and batch fails.
    pub fn set_unavailable(&self, down: bool) {
        self.unavailable.store(down, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> HashMap<Vec<u8>, Vec<u8>> {
        self.map.read().clone()
    }

    /// Writes directly, bypassing latency, faults and counters.
    pub fn preload<I: IntoIterator<Item = (Vec<u8>, Vec<u8>)>>(&self, items: I) {
        self.map.write().extend(items);
    }

    fn pause(micros: u64) {
        if micros > 0 {
            std::thread::sleep(Duration::from_micros(micros));
        }
    }

    fn check_up(&self) -> Result<(), StorageError> {
        if self.unavailable.load(Ordering::Relaxed) {
            Err(StorageError::IoFailure("storage unavailable".into()))
        } else {
            Ok(())
        }
    }
}

impl StorageBackend for SimulatedBackend {
    fn read(&self, key: &[u8]) -> Result<Option<Vec<u8>>, StorageError> {
        Self::pause(self.read_latency_us.load(Ordering::Relaxed));
        self.check_up()?;
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        self.counters.keys_read.fetch_add(1, Ordering::Relaxed);
        Ok(self.map.read().get(key).cloned())
    }

    fn multi_read(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>, StorageError> {
        Self::pause(self.read_latency_us.load(Ordering::Relaxed));
        self.check_up()?;
        self.counters.multi_reads.fetch_add(1, Ordering::Relaxed);
        self.counters
            .keys_read
            .fetch_add(keys.len() as u64, Ordering::Relaxed);
        let map = self.map.read();
        Ok(keys.iter().map(|k| map.get(k).cloned()).collect())
    }

    fn write_batch(&self, batch: &[BatchOp]) -> Result<(), StorageError> {
        validate_batch(batch)?;
        let _serial = self.write_lock.lock();
        Self::pause(self.write_latency_us.load(Ordering::Relaxed));
        let attempt = self.batch_attempts.fetch_add(1, Ordering::Relaxed) + 1;
        let every = self.fail_every.load(Ordering::Relaxed);
        if self.check_up().is_err() || (every > 0 && attempt.is_multiple_of(every)) {
            self.counters.record_batch(false, 0);
            return Err(StorageError::IoFailure(format!(
                "injected failure on batch {attempt}"
            )));
        }
        let mut map = self.map.write();
        for op in batch {
            match &op.value {
                Some(v) => {
                    map.insert(op.key.clone(), v.clone());
                }
                None => {
                    map.remove(&op.key);
                }
            }
        }
        self.counters.record_batch(true, batch.len());
        Ok(())
    }

    fn flush(&self) -> Result<(), StorageError> {
        self.check_up()
    }

    fn counters(&self) -> StorageCounters {
        self.counters.snapshot()
    }
}
