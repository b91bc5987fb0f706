//! LRU miss-ratio curves from access traces.
//!
//! One pass over the key sequence computes every access's LRU stack
//! distance (the number of distinct keys touched since the previous access
//! to the same key, counting the key itself). An LRU cache holding `n`
//! entries hits exactly the accesses with distance `<= n`, so the histogram
//! of distances yields the miss ratio at every cache size at once.
//!
//! Distances are counted with a Fenwick tree over access timestamps: each
//! key contributes a single mark at the time of its latest access, and the
//! distance of a re-reference is the number of marks in
//! `[previous_access, now)`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::{self, Write};

use thiserror::Error;

use crate::cost_model::MissRatioFn;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MrcError {
    #[error("trace has no accesses")]
    EmptyTrace,
    #[error("cache sizes must be sorted ascending")]
    UnsortedSizes,
}

/// Counts of LRU stack distances over a trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StackDistanceHistogram {
    /// Finite distance -> number of accesses at that distance.
    pub finite: BTreeMap<usize, u64>,
    /// First-time accesses (compulsory misses).
    pub infinite: u64,
}

impl StackDistanceHistogram {
    pub fn total(&self) -> u64 {
        self.infinite + self.finite.values().sum::<u64>()
    }

    /// Distinct keys seen; every key's first access is a cold miss.
    pub fn unique_keys(&self) -> u64 {
        self.infinite
    }

    /// Accesses that miss in an LRU cache of `size` entries.
    pub fn misses_at(&self, size: usize) -> u64 {
        self.infinite
            + self
                .finite
                .range(size.saturating_add(1)..)
                .map(|(_, c)| *c)
                .sum::<u64>()
    }
}

struct Fenwick {
    tree: Vec<i64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, idx: usize, delta: i64) {
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over `[0, idx)`.
    fn prefix(&self, idx: usize) -> i64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Builds the stack-distance histogram of a key sequence in one pass.
pub fn stack_distance_histogram<K, I>(keys: I) -> StackDistanceHistogram
where
    K: Hash + Eq,
    I: IntoIterator<Item = K>,
{
    let keys: Vec<K> = keys.into_iter().collect();
    let mut fenwick = Fenwick::new(keys.len());
    let mut last_seen: HashMap<&K, usize> = HashMap::with_capacity(keys.len().min(1 << 20));
    let mut hist = StackDistanceHistogram::default();

    for (t, key) in keys.iter().enumerate() {
        match last_seen.insert(key, t) {
            Some(prev) => {
                let distance = (fenwick.prefix(t) - fenwick.prefix(prev)) as usize;
                *hist.finite.entry(distance).or_insert(0) += 1;
                fenwick.add(prev, -1);
            }
            None => hist.infinite += 1,
        }
        fenwick.add(t, 1);
    }
    hist
}

/// Miss ratio by cache size in entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MissRatioCurve {
    /// `(cache_entries, miss_ratio)`, ascending by size, starting at size 0.
    pub points: Vec<(usize, f64)>,
    pub total_unique_keys: u64,
    pub total_accesses: u64,
}

impl MissRatioCurve {
    /// Miss ratio at `entries`, using the nearest measured size at or below
    /// it (conservative step interpolation).
    pub fn miss_ratio_at(&self, entries: usize) -> f64 {
        let idx = self.points.partition_point(|(s, _)| *s <= entries);
        if idx == 0 {
            1.0
        } else {
            self.points[idx - 1].1
        }
    }

    pub fn cold_miss_ratio(&self) -> f64 {
        self.total_unique_keys as f64 / self.total_accesses as f64
    }

    /// Writes `size,miss_ratio` rows under a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "size,miss_ratio")?;
        for (size, mr) in &self.points {
            writeln!(out, "{size},{mr}")?;
        }
        Ok(())
    }
}

/// Evaluates the curve at the given sizes (ascending). Size 0 is always
/// included with miss ratio 1.
pub fn miss_ratio_curve(
    hist: &StackDistanceHistogram,
    sizes: &[usize],
) -> Result<MissRatioCurve, MrcError> {
    let total = hist.total();
    if total == 0 {
        return Err(MrcError::EmptyTrace);
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(MrcError::UnsortedSizes);
    }

    let mut points = Vec::with_capacity(sizes.len() + 1);
    points.push((0usize, 1.0));
    // Walk the histogram once, accumulating hits up to each size.
    let mut hits: u64 = 0;
    let mut iter = hist.finite.iter().peekable();
    for &size in sizes {
        if size == 0 {
            continue;
        }
        while let Some((&d, &c)) = iter.peek() {
            if d > size {
                break;
            }
            hits += c;
            iter.next();
        }
        let mr = (total - hits) as f64 / total as f64;
        if points.last().map(|(s, _)| *s) == Some(size) {
            continue;
        }
        points.push((size, mr));
    }
    Ok(MissRatioCurve {
        points,
        total_unique_keys: hist.unique_keys(),
        total_accesses: total,
    })
}

/// The curve at every size from 1 up to the number of distinct keys.
pub fn full_miss_ratio_curve(hist: &StackDistanceHistogram) -> Result<MissRatioCurve, MrcError> {
    let sizes: Vec<usize> = (1..=hist.unique_keys() as usize).collect();
    miss_ratio_curve(hist, &sizes)
}

/// A miss-ratio curve addressed by cache ratio instead of entry count.
#[derive(Debug, Clone)]
pub struct RatioCurve {
    curve: MissRatioCurve,
    total_entries: f64,
}

/// Converts an entry-count curve into `f(CR)`, assuming uniform record size:
/// a cache ratio `cr` holds `floor(cr × total_data / avg_record_size)`
/// entries.
pub fn as_ratio_curve(curve: MissRatioCurve, total_data: f64, avg_record_size: f64) -> RatioCurve {
    assert!(total_data > 0.0, "total_data must be positive");
    assert!(avg_record_size > 0.0, "avg_record_size must be positive");
    RatioCurve {
        curve,
        total_entries: total_data / avg_record_size,
    }
}

impl RatioCurve {
    pub fn curve(&self) -> &MissRatioCurve {
        &self.curve
    }

    pub fn entries_at(&self, cache_ratio: f64) -> usize {
        // Guard against 0.5*3 style float error just below an integer.
        let e = cache_ratio.clamp(0.0, 1.0) * self.total_entries;
        (e + 1e-9).floor() as usize
    }
}

impl MissRatioFn for RatioCurve {
    fn miss_ratio(&self, cache_ratio: f64) -> f64 {
        self.curve.miss_ratio_at(self.entries_at(cache_ratio))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference LRU: a recency list, most recent at the end.
    fn simulate_lru(keys: &[u32], size: usize) -> u64 {
        let mut stack: Vec<u32> = Vec::new();
        let mut misses = 0;
        for &k in keys {
            if let Some(pos) = stack.iter().position(|&x| x == k) {
                stack.remove(pos);
            } else {
                misses += 1;
                if stack.len() == size {
                    if size == 0 {
                        continue;
                    }
                    stack.remove(0);
                }
            }
            stack.push(k);
        }
        misses
    }

    #[test]
    fn histogram_examples() {
        let h = stack_distance_histogram(["a", "b", "c", "a", "b", "c"]);
        assert_eq!(h.finite, BTreeMap::from([(3, 3)]));
        assert_eq!(h.infinite, 3);

        let h = stack_distance_histogram(["a", "a", "a"]);
        assert_eq!(h.finite, BTreeMap::from([(1, 2)]));
        assert_eq!(h.infinite, 1);

        let h = stack_distance_histogram(["a", "b", "c"]);
        assert!(h.finite.is_empty());
        assert_eq!(h.infinite, 3);
    }

    #[test]
    fn curve_examples() {
        let h = stack_distance_histogram(["a", "b", "c", "a", "b", "c"]);
        let c = miss_ratio_curve(&h, &[1, 2, 3]).unwrap();
        assert_eq!(c.miss_ratio_at(3), 0.5);
        assert_eq!(c.miss_ratio_at(2), 1.0);
        assert_eq!(c.miss_ratio_at(0), 1.0);
        assert_eq!(c.points[0], (0, 1.0));
        assert_eq!(
            miss_ratio_curve(&StackDistanceHistogram::default(), &[1]),
            Err(MrcError::EmptyTrace)
        );
        assert_eq!(miss_ratio_curve(&h, &[3, 1]), Err(MrcError::UnsortedSizes));
    }

    #[test]
    fn ratio_curve_examples() {
        let h = stack_distance_histogram(["a", "b", "c", "a", "b", "c"]);
        let c = full_miss_ratio_curve(&h).unwrap();
        let f = as_ratio_curve(c, 300.0, 100.0);
        assert_eq!(f.miss_ratio(1.0), 0.5);
        assert_eq!(f.miss_ratio(1.0), f.curve().cold_miss_ratio());
        assert_eq!(f.miss_ratio(0.0), 1.0);
        assert_eq!(f.miss_ratio(0.5), 1.0);
    }

    #[test]
    fn csv_output() {
        let h = stack_distance_histogram([1, 1]);
        let c = full_miss_ratio_curve(&h).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "size,miss_ratio\n0,1\n1,0.5\n");
    }

    #[test]
    fn matches_lru_simulation_on_small_traces() {
        let keys: Vec<u32> = (0..500).map(|i| (i * 7919 % 13 + i % 5) as u32).collect();
        let h = stack_distance_histogram(keys.iter().copied());
        let unique = h.unique_keys() as usize;
        let c = full_miss_ratio_curve(&h).unwrap();
        for size in 0..=unique + 2 {
            let expected = simulate_lru(&keys, size) as f64 / keys.len() as f64;
            assert_eq!(c.miss_ratio_at(size), expected, "size {size}");
        }
    }
}
