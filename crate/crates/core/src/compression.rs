//! Pre-trained dictionary compression for values.
//!
//! A dictionary of frequent substrings is trained offline from sample
//! records, then used to encode each record as a stream of pattern
//! references and literal runs. A [`CompressionMonitor`] tracks the achieved
//! ratio and the share of records no pattern matched, and signals when the
//! dictionary should be retrained.
//!
//! Encoded layout:
//!
//! ```text
//! header: 0x00 passthrough (raw bytes follow) | 0x01 dictionary-encoded
//! token:  0xFF u16-le len <len bytes>          literal run
//!         <id>                                  pattern reference, id < 0xFE
//! ```
//!
//! Dictionary file layout: `b"TKVD"`, u8 version, u16-le pattern count, then
//! per pattern a u16-le length and the pattern bytes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub const MAX_PATTERNS: usize = 254;
pub const MIN_PATTERN_LEN_FLOOR: usize = 4;
/// Longest pattern the trainer will grow.
pub const MAX_PATTERN_LEN: usize = 1024;

const HEADER_RAW: u8 = 0x00;
const HEADER_DICT: u8 = 0x01;
const TOKEN_LITERAL: u8 = 0xFF;
const MAX_LITERAL_RUN: usize = u16::MAX as usize;
const DICT_MAGIC: &[u8; 4] = b"TKVD";

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("corrupt blob: {0}")]
    CorruptBlob(&'static str),
    #[error("blob encoded with dictionary v{blob}, have v{dict}")]
    DictVersionMismatch { blob: u8, dict: u8 },
    #[error("invalid training parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed dictionary file: {0}")]
    BadDictionaryFile(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    pub version: u8,
    /// Pattern `i` is referenced by id byte `i`.
    pub patterns: Vec<Vec<u8>>,
    pub min_pattern_len: usize,
    pub trained_on: usize,
}

impl Dictionary {
    pub fn empty(version: u8) -> Self {
        Self {
            version,
            patterns: Vec::new(),
            min_pattern_len: MIN_PATTERN_LEN_FLOOR,
            trained_on: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + self.patterns.iter().map(|p| p.len() + 2).sum::<usize>());
        out.extend_from_slice(DICT_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(self.patterns.len() as u16).to_le_bytes());
        for p in &self.patterns {
            out.extend_from_slice(&(p.len() as u16).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CompressionError> {
        let bad = CompressionError::BadDictionaryFile;
        if buf.len() < 7 || &buf[..4] != DICT_MAGIC {
            return Err(bad("missing TKVD magic"));
        }
        let version = buf[4];
        let count = u16::from_le_bytes([buf[5], buf[6]]) as usize;
        if count > MAX_PATTERNS {
            return Err(bad("more than 254 patterns"));
        }
        let mut pos = 7;
        let mut patterns = Vec::with_capacity(count);
        for _ in 0..count {
            let len_bytes = buf.get(pos..pos + 2).ok_or(bad("truncated pattern length"))?;
            let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            pos += 2;
            let p = buf.get(pos..pos + len).ok_or(bad("truncated pattern"))?;
            if p.is_empty() {
                return Err(bad("empty pattern"));
            }
            patterns.push(p.to_vec());
            pos += len;
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let min_pattern_len = patterns
            .iter()
            .map(Vec::len)
            .min()
            .unwrap_or(MIN_PATTERN_LEN_FLOOR);
        Ok(Self {
            version,
            patterns,
            min_pattern_len,
            trained_on: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CompressionError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CompressionError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Trainer knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub max_patterns: usize,
    pub min_pattern_len: usize,
    /// Minimum fraction of samples a pattern must occur in.
    pub min_support: f64,
    pub version: u8,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            max_patterns: MAX_PATTERNS,
            min_pattern_len: 8,
            min_support: 0.1,
            version: 1,
        }
    }
}

/// Occurrences of one candidate substring: `(sample, start)` pairs.
type Occurrences = Vec<(u32, u32)>;

fn support(occ: &Occurrences) -> usize {
    // occurrences are generated in sample order
    let mut n = 0;
    let mut last = u32::MAX;
    for &(s, _) in occ {
        if s != last {
            n += 1;
            last = s;
        }
    }
    n
}

/// Trains a dictionary of frequent substrings.
///
/// Candidates are every substring of length `>= min_pattern_len` present
/// in at least `min_support × samples` samples, grown one byte at a time
/// from frequent `min_pattern_len`-grams. A candidate is dropped when a
/// one-byte extension has the same support, since that extension always
/// scores higher. The rest are ranked by `support × length` (longer first
/// on ties) and taken greedily, skipping any that is a substring of an
/// already selected pattern.
pub fn train_dictionary(samples: &[Vec<u8>], params: TrainParams) -> Result<Dictionary, CompressionError> {
    if params.max_patterns > MAX_PATTERNS {
        return Err(CompressionError::InvalidParameter(format!(
            "max_patterns {} exceeds {MAX_PATTERNS}",
            params.max_patterns
        )));
    }
    if params.min_pattern_len < MIN_PATTERN_LEN_FLOOR {
        return Err(CompressionError::InvalidParameter(format!(
            "min_pattern_len {} below {MIN_PATTERN_LEN_FLOOR}",
            params.min_pattern_len
        )));
    }
    if !(0.0..=1.0).contains(&params.min_support) {
        return Err(CompressionError::InvalidParameter(format!(
            "min_support {} outside [0, 1]",
            params.min_support
        )));
    }
    let mut dict = Dictionary {
        version: params.version,
        patterns: Vec::new(),
        min_pattern_len: params.min_pattern_len,
        trained_on: samples.len(),
    };
    if samples.is_empty() || params.max_patterns == 0 {
        return Ok(dict);
    }
    let threshold = ((params.min_support * samples.len() as f64).ceil() as usize).max(1);
    let k = params.min_pattern_len;

    let mut level: HashMap<&[u8], Occurrences> = HashMap::new();
    for (si, s) in samples.iter().enumerate() {
        if s.len() < k {
            continue;
        }
        for start in 0..=s.len() - k {
            level
                .entry(&s[start..start + k])
                .or_default()
                .push((si as u32, start as u32));
        }
    }
    level.retain(|_, occ| support(occ) >= threshold);

    // (pattern, support) of closed frequent substrings
    let mut candidates: Vec<(&[u8], usize)> = Vec::new();
    let mut len = k;
    while !level.is_empty() {
        let mut next: HashMap<&[u8], Occurrences> = HashMap::new();
        if len < MAX_PATTERN_LEN {
            for occ in level.values() {
                for &(si, start) in occ {
                    let s = &samples[si as usize];
                    let end = start as usize + len + 1;
                    if end <= s.len() {
                        next.entry(&s[start as usize..end])
                            .or_default()
                            .push((si, start));
                    }
                }
            }
            next.retain(|_, occ| support(occ) >= threshold);
        }
        let mut absorbed: HashSet<&[u8]> = HashSet::new();
        for (q, occ) in &next {
            let sup = support(occ);
            for part in [&q[..q.len() - 1], &q[1..]] {
                if level.get(part).is_some_and(|o| support(o) == sup) {
                    absorbed.insert(part);
                }
            }
        }
        for (p, occ) in &level {
            if !absorbed.contains(p) {
                candidates.push((p, support(occ)));
            }
        }
        level = next;
        len += 1;
    }

    candidates.sort_by(|a, b| {
        let sa = a.1 * a.0.len();
        let sb = b.1 * b.0.len();
        sb.cmp(&sa)
            .then(b.0.len().cmp(&a.0.len()))
            .then(a.0.cmp(b.0))
    });
    for (p, _) in candidates {
        if dict.patterns.len() >= params.max_patterns {
            break;
        }
        if dict.patterns.iter().any(|sel| contains_subslice(sel, p)) {
            continue;
        }
        dict.patterns.push(p.to_vec());
    }
    Ok(dict)
}

fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    needle.len() <= haystack.len() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Second-stage coder applied to literal runs. The identity coder leaves
/// them untouched.
pub trait ResidualCodec: Send + Sync {
    fn encode(&self, literal: &[u8]) -> Vec<u8>;
    fn decode(&self, encoded: &[u8]) -> Result<Vec<u8>, CompressionError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityResidual;

impl ResidualCodec for IdentityResidual {
    fn encode(&self, literal: &[u8]) -> Vec<u8> {
        literal.to_vec()
    }

    fn decode(&self, encoded: &[u8]) -> Result<Vec<u8>, CompressionError> {
        Ok(encoded.to_vec())
    }
}

/// Outcome of encoding one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    /// Number of pattern references emitted; zero means the record did not
    /// match the dictionary.
    pub pattern_refs: usize,
}

/// A dictionary plus the lookup structure used for greedy matching.
pub struct Codec {
    dict: Arc<Dictionary>,
    /// Pattern ids keyed by their first `min_len` bytes, longest first.
    by_prefix: HashMap<Vec<u8>, Vec<u8>>,
    min_len: usize,
    residual: Box<dyn ResidualCodec>,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec")
            .field("version", &self.dict.version)
            .field("patterns", &self.dict.patterns.len())
            .finish()
    }
}

impl Codec {
    pub fn new(dict: Arc<Dictionary>) -> Self {
        Self::with_residual(dict, Box::new(IdentityResidual))
    }

    pub fn with_residual(dict: Arc<Dictionary>, residual: Box<dyn ResidualCodec>) -> Self {
        assert!(dict.patterns.len() <= MAX_PATTERNS, "too many patterns");
        let min_len = dict.patterns.iter().map(Vec::len).min().unwrap_or(1);
        let mut by_prefix: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
        for (id, p) in dict.patterns.iter().enumerate() {
            by_prefix.entry(p[..min_len].to_vec()).or_default().push(id as u8);
        }
        for ids in by_prefix.values_mut() {
            ids.sort_by_key(|&id| std::cmp::Reverse(dict.patterns[id as usize].len()));
        }
        Self {
            dict,
            by_prefix,
            min_len,
            residual,
        }
    }

    pub fn dictionary(&self) -> &Arc<Dictionary> {
        &self.dict
    }

    pub fn version(&self) -> u8 {
        self.dict.version
    }

    fn longest_match(&self, rest: &[u8]) -> Option<u8> {
        if rest.len() < self.min_len {
            return None;
        }
        self.by_prefix.get(&rest[..self.min_len])?.iter().copied().find(|&id| {
            let p = &self.dict.patterns[id as usize];
            rest.len() >= p.len() && &rest[..p.len()] == p.as_slice()
        })
    }

    fn push_literal(&self, out: &mut Vec<u8>, lit: &[u8]) {
        let enc = self.residual.encode(lit);
        for chunk in enc.chunks(MAX_LITERAL_RUN) {
            out.push(TOKEN_LITERAL);
            out.extend_from_slice(&(chunk.len() as u16).to_le_bytes());
            out.extend_from_slice(chunk);
        }
    }

    /// Encodes `record`, falling back to passthrough when the dictionary
    /// form would not be shorter than the input.
    pub fn compress(&self, record: &[u8]) -> Encoded {
        let mut out = Vec::with_capacity(record.len() + 1);
        out.push(HEADER_DICT);
        let mut refs = 0;
        let mut lit_start = 0;
        let mut i = 0;
        while i < record.len() {
            match self.longest_match(&record[i..]) {
                Some(id) => {
                    if lit_start < i {
                        self.push_literal(&mut out, &record[lit_start..i]);
                    }
                    out.push(id);
                    refs += 1;
                    i += self.dict.patterns[id as usize].len();
                    lit_start = i;
                }
                None => i += 1,
            }
        }
        if lit_start < record.len() {
            self.push_literal(&mut out, &record[lit_start..]);
        }
        if refs == 0 || out.len() >= record.len() {
            let mut raw = Vec::with_capacity(record.len() + 1);
            raw.push(HEADER_RAW);
            raw.extend_from_slice(record);
            return Encoded {
                bytes: raw,
                pattern_refs: refs,
            };
        }
        Encoded {
            bytes: out,
            pattern_refs: refs,
        }
    }

    pub fn decompress(&self, blob: &[u8]) -> Result<Vec<u8>, CompressionError> {
        let (&header, body) = blob
            .split_first()
            .ok_or(CompressionError::CorruptBlob("empty blob"))?;
        match header {
            HEADER_RAW => Ok(body.to_vec()),
            HEADER_DICT => {
                let mut out = Vec::with_capacity(body.len() * 2);
                let mut i = 0;
                while i < body.len() {
                    let t = body[i];
                    i += 1;
                    if t == TOKEN_LITERAL {
                        let len_bytes = body
                            .get(i..i + 2)
                            .ok_or(CompressionError::CorruptBlob("truncated literal length"))?;
                        let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
                        i += 2;
                        let lit = body
                            .get(i..i + len)
                            .ok_or(CompressionError::CorruptBlob("literal run overruns blob"))?;
                        out.extend_from_slice(&self.residual.decode(lit)?);
                        i += len;
                    } else {
                        let p = self
                            .dict
                            .patterns
                            .get(t as usize)
                            .ok_or(CompressionError::CorruptBlob("dangling pattern id"))?;
                        out.extend_from_slice(p);
                    }
                }
                Ok(out)
            }
            _ => Err(CompressionError::CorruptBlob("unknown header")),
        }
    }

    /// Decodes a blob tagged with the dictionary version that produced it.
    pub fn decompress_versioned(&self, blob: &[u8], blob_version: u8) -> Result<Vec<u8>, CompressionError> {
        if blob_version != self.dict.version {
            return Err(CompressionError::DictVersionMismatch {
                blob: blob_version,
                dict: self.dict.version,
            });
        }
        self.decompress(blob)
    }
}

pub fn compress(record: &[u8], dict: &Arc<Dictionary>) -> Vec<u8> {
    Codec::new(dict.clone()).compress(record).bytes
}

pub fn decompress(blob: &[u8], dict: &Arc<Dictionary>) -> Result<Vec<u8>, CompressionError> {
    Codec::new(dict.clone()).decompress(blob)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompressionStats {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub unmatched_records: u64,
    pub records: u64,
    /// Ratio achieved right after training, the reference for degradation.
    pub baseline_ratio: f64,
}

impl CompressionStats {
    /// `bytes_out / bytes_in`; lower is better.
    pub fn ratio(&self) -> f64 {
        if self.bytes_in == 0 {
            1.0
        } else {
            self.bytes_out as f64 / self.bytes_in as f64
        }
    }

    pub fn unmatched_fraction(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.unmatched_records as f64 / self.records as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainPolicy {
    /// Allowed relative growth of the ratio over the baseline.
    pub ratio_degradation: f64,
    /// Allowed share of records with no pattern match.
    pub unmatched_threshold: f64,
}

impl Default for RetrainPolicy {
    fn default() -> Self {
        Self {
            ratio_degradation: 0.15,
            unmatched_threshold: 0.3,
        }
    }
}

/// True once compression has degraded past the baseline or too many records
/// miss the dictionary.
pub fn should_retrain(stats: &CompressionStats, policy: RetrainPolicy) -> bool {
    if stats.records == 0 {
        return false;
    }
    stats.ratio() > stats.baseline_ratio * (1.0 + policy.ratio_degradation)
        || stats.unmatched_fraction() > policy.unmatched_threshold
}

/// Shared counters fed by every compress call.
#[derive(Debug, Default)]
pub struct CompressionMonitor {
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
    unmatched: AtomicU64,
    records: AtomicU64,
    /// f64 bits
    baseline: AtomicU64,
}

impl CompressionMonitor {
    pub fn new(baseline_ratio: f64) -> Self {
        let m = Self::default();
        m.baseline.store(baseline_ratio.to_bits(), Ordering::Relaxed);
        m
    }

    pub fn record(&self, raw_len: usize, encoded: &Encoded) {
        self.bytes_in.fetch_add(raw_len as u64, Ordering::Relaxed);
        self.bytes_out
            .fetch_add(encoded.bytes.len() as u64, Ordering::Relaxed);
        self.records.fetch_add(1, Ordering::Relaxed);
        if encoded.pattern_refs == 0 {
            self.unmatched.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn stats(&self) -> CompressionStats {
        CompressionStats {
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
            unmatched_records: self.unmatched.load(Ordering::Relaxed),
            records: self.records.load(Ordering::Relaxed),
            baseline_ratio: f64::from_bits(self.baseline.load(Ordering::Relaxed)),
        }
    }

    /// Starts a new observation period against a new baseline.
    pub fn reset(&self, baseline_ratio: f64) {
        self.bytes_in.store(0, Ordering::Relaxed);
        self.bytes_out.store(0, Ordering::Relaxed);
        self.unmatched.store(0, Ordering::Relaxed);
        self.records.store(0, Ordering::Relaxed);
        self.baseline.store(baseline_ratio.to_bits(), Ordering::Relaxed);
    }
}

/// Ratio a codec achieves over a set of records.
pub fn measure_ratio(codec: &Codec, records: &[Vec<u8>]) -> CompressionStats {
    let m = CompressionMonitor::new(0.0);
    for r in records {
        m.record(r.len(), &codec.compress(r));
    }
    let mut s = m.stats();
    s.baseline_ratio = s.ratio();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(patterns: &[&str]) -> Arc<Dictionary> {
        Arc::new(Dictionary {
            version: 1,
            patterns: patterns.iter().map(|p| p.as_bytes().to_vec()).collect(),
            min_pattern_len: 4,
            trained_on: 0,
        })
    }

    fn params(min_support: f64) -> TrainParams {
        TrainParams {
            max_patterns: 16,
            min_pattern_len: 4,
            min_support,
            version: 1,
        }
    }

    #[test]
    fn shared_prefix_is_learned() {
        let samples: Vec<Vec<u8>> = (0..100)
            .map(|i| format!("user:location:city:{}", i * 7919 % 1000).into_bytes())
            .collect();
        let d = train_dictionary(&samples, params(0.5)).unwrap();
        let prefix = b"user:location:city:";
        assert!(
            d.patterns.iter().any(|p| contains_subslice(p, prefix)),
            "{:?}",
            d.patterns.iter().map(|p| String::from_utf8_lossy(p)).collect::<Vec<_>>()
        );
        assert_eq!(d.trained_on, 100);
    }

    #[test]
    fn degenerate_training_inputs() {
        assert!(train_dictionary(&[], params(0.5)).unwrap().is_empty());
        let short = vec![b"abc".to_vec(), b"abcd".to_vec()];
        let p = TrainParams {
            min_pattern_len: 10,
            ..params(0.5)
        };
        assert!(train_dictionary(&short, p).unwrap().is_empty());
        assert!(train_dictionary(&short, TrainParams { max_patterns: 255, ..params(0.5) }).is_err());
        assert!(train_dictionary(&short, TrainParams { min_pattern_len: 3, ..params(0.5) }).is_err());
    }

    #[test]
    fn selected_patterns_are_distinct_and_not_nested() {
        let samples: Vec<Vec<u8>> = (0..50)
            .map(|i| format!("{{\"name\":\"n{i}\",\"status\":\"active\",\"tier\":{}}}", i % 3).into_bytes())
            .collect();
        let d = train_dictionary(&samples, params(0.3)).unwrap();
        assert!(!d.is_empty());
        for (i, a) in d.patterns.iter().enumerate() {
            assert!(a.len() >= 4);
            for (j, b) in d.patterns.iter().enumerate() {
                if i < j {
                    assert!(!contains_subslice(a, b), "pattern {j} nested in {i}");
                }
            }
        }
    }

    #[test]
    fn empty_dictionary_passes_through() {
        let d = Arc::new(Dictionary::empty(1));
        let out = compress(b"hello world", &d);
        assert_eq!(out.len(), 12);
        assert_eq!(out[0], 0x00);
        assert_eq!(decompress(&out, &d).unwrap(), b"hello world");
    }

    #[test]
    fn whole_record_match_is_two_bytes() {
        let d = dict(&["patternX"]);
        assert_eq!(compress(b"patternX", &d), vec![0x01, 0x00]);
    }

    #[test]
    fn hand_encoded_token_stream() {
        let d = dict(&["123456789"]);
        let out = compress(b"AB123456789CD", &d);
        assert_eq!(
            out,
            vec![0x01, 0xFF, 2, 0, b'A', b'B', 0x00, 0xFF, 2, 0, b'C', b'D']
        );
        assert!(out.len() < 14);
        // eight-byte pattern: encoded form is no shorter, so passthrough
        let d8 = dict(&["12345678"]);
        assert_eq!(compress(b"AB12345678CD", &d8)[0], 0x00);
    }

    #[test]
    fn greedy_prefers_longest_pattern() {
        let d = dict(&["abcd", "abcdefgh"]);
        assert_eq!(compress(b"abcdefghabcd", &d), vec![0x01, 1, 0]);
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let d = dict(&["abcd"]);
        let c = Codec::new(d);
        assert!(matches!(c.decompress(&[]), Err(CompressionError::CorruptBlob(_))));
        assert!(matches!(c.decompress(&[0x07]), Err(CompressionError::CorruptBlob(_))));
        assert!(matches!(c.decompress(&[0x01, 5]), Err(CompressionError::CorruptBlob(_))));
        assert!(matches!(
            c.decompress(&[0x01, 0xFF, 9, 0, b'a']),
            Err(CompressionError::CorruptBlob(_))
        ));
        assert!(matches!(c.decompress(&[0x01, 0xFF, 9]), Err(CompressionError::CorruptBlob(_))));
        assert_eq!(c.decompress(&[0x00, 1, 2]).unwrap(), vec![1, 2]);
        assert!(matches!(
            c.decompress_versioned(&[0x00], 2),
            Err(CompressionError::DictVersionMismatch { blob: 2, dict: 1 })
        ));
    }

    #[test]
    fn long_literals_are_split_into_runs() {
        let d = dict(&["zzzzzzzzzzzzzzzzzzzzzzzz"]);
        let mut rec = vec![b'a'; 70_000];
        rec.extend_from_slice(&[b'z'; 24 * 10]);
        let c = Codec::new(d);
        let enc = c.compress(&rec);
        assert_eq!(enc.bytes[0], 0x01);
        assert_eq!(c.decompress(&enc.bytes).unwrap(), rec);
    }

    #[test]
    fn dictionary_file_roundtrip() {
        let d = Dictionary {
            version: 3,
            patterns: vec![b"abcd".to_vec(), b"longer pattern".to_vec()],
            min_pattern_len: 4,
            trained_on: 0,
        };
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..7], &[b'T', b'K', b'V', b'D', 3, 2, 0]);
        assert_eq!(Dictionary::from_bytes(&bytes).unwrap(), d);
        assert!(Dictionary::from_bytes(b"XKVD\x01\x00\x00").is_err());
        assert!(Dictionary::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn retrain_truth_table() {
        let p = RetrainPolicy::default();
        let s = |bytes_out, unmatched, baseline| CompressionStats {
            bytes_in: 100,
            bytes_out,
            unmatched_records: unmatched,
            records: 100,
            baseline_ratio: baseline,
        };
        assert!(should_retrain(&s(60, 0, 0.5), p));
        assert!(!should_retrain(&s(57, 0, 0.5), p));
        assert!(should_retrain(&s(50, 31, 0.5), p));
        assert!(!should_retrain(&s(50, 30, 0.5), p));
        assert!(!should_retrain(&s(50, 0, 0.5), p));
    }

    #[test]
    fn monitor_counts_unmatched_records() {
        let c = Codec::new(dict(&["template-part"]));
        let m = CompressionMonitor::new(0.5);
        for r in [&b"template-part-1"[..], b"nothing here", b"template-part"] {
            m.record(r.len(), &c.compress(r));
        }
        let s = m.stats();
        assert_eq!((s.records, s.unmatched_records), (3, 1));
        assert_eq!(s.baseline_ratio, 0.5);
        m.reset(0.4);
        assert_eq!(m.stats().records, 0);
    }
}
