//! Space-performance cost model.
//!
//! A configuration running on a fixed-size resource instance has a measured
//! throughput ceiling (`MaxPerf`, queries/second) and a measured capacity
//! ceiling (`MaxSpace`, bytes). Serving a workload needs enough instances to
//! cover whichever demand is larger, so the cost of the workload is the
//! maximum of its performance cost and its space cost.
//!
//! Everything in this module is a pure function over immutable inputs.

use std::fmt;

use thiserror::Error;

/// Bytes per gigabyte used for every per-GB quantity (binary gigabyte).
pub const GB: f64 = (1u64 << 30) as f64;

/// Relative tolerance used to call a workload balanced.
pub const BALANCE_TOLERANCE: f64 = 1e-9;

/// Grid resolution used by [`optimal_cache_ratio`].
pub const CACHE_RATIO_GRID_STEP: f64 = 1e-4;

const GRID_POINTS: usize = 10_000;
const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("configuration set is empty")]
    EmptyConfigSet,
    #[error("miss-ratio curve increases at cache ratio {at}")]
    InvalidCurve { at: f64 },
    #[error("input `{0}` must be strictly positive")]
    NonPositiveInput(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

fn invalid(name: &'static str, reason: impl Into<String>) -> CostError {
    CostError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn require_finite_nonneg(name: &'static str, v: f64) -> Result<(), CostError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("expected a finite value >= 0, got {v}")))
    }
}

fn require_positive(name: &'static str, v: f64) -> Result<(), CostError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CostError::NonPositiveInput(name))
    }
}

fn require_fraction(name: &'static str, v: f64) -> Result<(), CostError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(name, format!("expected a value in [0, 1], got {v}")))
    }
}

/// Aggregate demand of a workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadProfile {
    /// Queries per second.
    pub qps: f64,
    /// Total bytes the workload stores.
    pub data_size: f64,
    /// Average bytes per record.
    pub avg_record_size: f64,
    /// Fraction of operations that are reads.
    pub read_fraction: f64,
}

impl WorkloadProfile {
    pub fn new(
        qps: f64,
        data_size: f64,
        avg_record_size: f64,
        read_fraction: f64,
    ) -> Result<Self, CostError> {
        require_finite_nonneg("qps", qps)?;
        require_finite_nonneg("data_size", data_size)?;
        require_positive("avg_record_size", avg_record_size)?;
        require_fraction("read_fraction", read_fraction)?;
        Ok(Self {
            qps,
            data_size,
            avg_record_size,
            read_fraction,
        })
    }
}

/// A resource instance with a fixed allocation and price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    /// Cost-units per instance per accounting period.
    pub cost: f64,
    pub cpu_cores: u32,
    /// Memory in bytes.
    pub memory: u64,
}

impl InstanceSpec {
    pub fn new(cost: f64, cpu_cores: u32, memory: u64) -> Result<Self, CostError> {
        require_positive("cost", cost)?;
        Ok(Self {
            cost,
            cpu_cores,
            memory,
        })
    }
}

/// Measured capacity ceilings of one configuration on one instance type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMeasurement {
    pub config_id: String,
    /// Queries per second.
    pub max_perf: f64,
    /// Bytes of workload data storable.
    pub max_space: f64,
}

impl ConfigMeasurement {
    pub fn new(
        config_id: impl Into<String>,
        max_perf: f64,
        max_space: f64,
    ) -> Result<Self, CostError> {
        require_positive("max_perf", max_perf)?;
        require_positive("max_space", max_space)?;
        Ok(Self {
            config_id: config_id.into(),
            max_perf,
            max_space,
        })
    }

    /// Derates both ceilings by the given headroom fractions, each in (0, 1].
    pub fn with_headroom(&self, perf_headroom: f64, space_headroom: f64) -> Result<Self, CostError> {
        Headroom::new(perf_headroom, space_headroom)?;
        Ok(Self {
            config_id: self.config_id.clone(),
            max_perf: self.max_perf * perf_headroom,
            max_space: self.max_space * space_headroom,
        })
    }
}

/// Tolerance multipliers applied to measured ceilings before costing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Headroom {
    pub perf: f64,
    pub space: f64,
}

impl Default for Headroom {
    fn default() -> Self {
        Self {
            perf: 0.85,
            space: 0.85,
        }
    }
}

impl Headroom {
    pub const NONE: Headroom = Headroom {
        perf: 1.0,
        space: 1.0,
    };

    pub fn new(perf: f64, space: f64) -> Result<Self, CostError> {
        for (name, v) in [("perf_headroom", perf), ("space_headroom", space)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(name, format!("expected a value in (0, 1], got {v}")));
            }
        }
        Ok(Self { perf, space })
    }
}

/// Unit costs of throughput and capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostMetrics {
    /// Cost-units per (query/second).
    pub cpqps: f64,
    /// Cost-units per gigabyte.
    pub cpgb: f64,
}

impl CostMetrics {
    pub fn from_measurement(instance: &InstanceSpec, m: &ConfigMeasurement) -> Self {
        Self {
            cpqps: instance.cost / m.max_perf,
            cpgb: instance.cost / (m.max_space / GB),
        }
    }
}

/// Which of the two cost components dominates a workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Classification {
    PerformanceCritical,
    SpaceCritical,
    Balanced,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::PerformanceCritical => "performance-critical",
            Classification::SpaceCritical => "space-critical",
            Classification::Balanced => "balanced",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Cost evaluation knobs.
///
/// With `ceiling` set (the default) instance counts are rounded up to whole
/// instances. Clearing it gives the continuous form `CPQPS × QPS`,
/// `CPGB × DataSize` used when a workload spans many instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub ceiling: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { ceiling: true }
    }
}

/// Performance cost, space cost, their maximum and the resulting class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub pc: f64,
    pub sc: f64,
    pub total: f64,
    pub class: Classification,
}

impl CostModel {
    pub const CONTINUOUS: CostModel = CostModel { ceiling: false };

    fn instances(&self, demand: f64, capacity: f64) -> f64 {
        let ratio = demand / capacity;
        if self.ceiling {
            ratio.ceil()
        } else {
            ratio
        }
    }

    pub fn performance_cost(
        &self,
        profile: &WorkloadProfile,
        instance: &InstanceSpec,
        m: &ConfigMeasurement,
    ) -> f64 {
        instance.cost * self.instances(profile.qps, m.max_perf)
    }

    pub fn space_cost(
        &self,
        profile: &WorkloadProfile,
        instance: &InstanceSpec,
        m: &ConfigMeasurement,
    ) -> f64 {
        instance.cost * self.instances(profile.data_size, m.max_space)
    }

    pub fn evaluate(
        &self,
        profile: &WorkloadProfile,
        instance: &InstanceSpec,
        m: &ConfigMeasurement,
    ) -> CostBreakdown {
        let pc = self.performance_cost(profile, instance, m);
        let sc = self.space_cost(profile, instance, m);
        CostBreakdown {
            pc,
            sc,
            total: total_cost(pc, sc),
            class: classify_workload(pc, sc),
        }
    }
}

/// `Cost(i) × ceil(QPS / MaxPerf)`.
pub fn performance_cost(
    profile: &WorkloadProfile,
    instance: &InstanceSpec,
    m: &ConfigMeasurement,
) -> f64 {
    CostModel::default().performance_cost(profile, instance, m)
}

/// `Cost(i) × ceil(DataSize / MaxSpace)`.
pub fn space_cost(profile: &WorkloadProfile, instance: &InstanceSpec, m: &ConfigMeasurement) -> f64 {
    CostModel::default().space_cost(profile, instance, m)
}

pub fn total_cost(pc: f64, sc: f64) -> f64 {
    pc.max(sc)
}

pub fn classify_workload(pc: f64, sc: f64) -> Classification {
    let scale = pc.abs().max(sc.abs());
    if (pc - sc).abs() <= BALANCE_TOLERANCE * scale {
        Classification::Balanced
    } else if pc > sc {
        Classification::PerformanceCritical
    } else {
        Classification::SpaceCritical
    }
}

/// A candidate configuration with its already-computed costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigCost {
    pub config_id: String,
    pub pc: f64,
    pub sc: f64,
}

impl ConfigCost {
    pub fn new(config_id: impl Into<String>, pc: f64, sc: f64) -> Self {
        Self {
            config_id: config_id.into(),
            pc,
            sc,
        }
    }

    pub fn total(&self) -> f64 {
        total_cost(self.pc, self.sc)
    }

    pub fn imbalance(&self) -> f64 {
        (self.pc - self.sc).abs()
    }
}

/// Picks the configuration with the smallest `max(pc, sc)`.
///
/// Ties go to the smaller `|pc - sc|`, then to the earlier entry. For a
/// finite set the balanced point need not exist, so the min-max is what is
/// minimized; the imbalance only breaks ties.
pub fn select_optimal_config(configs: &[ConfigCost]) -> Result<&ConfigCost, CostError> {
    let mut best: Option<&ConfigCost> = None;
    for c in configs {
        best = match best {
            None => Some(c),
            Some(b) => {
                let (ct, bt) = (c.total(), b.total());
                if ct < bt || (ct == bt && c.imbalance() < b.imbalance()) {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or(CostError::EmptyConfigSet)
}

/// A point on a continuous `CPQPS = f(CPGB)` trade-off family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub cpgb: f64,
    pub cpqps: f64,
    pub pc: f64,
    pub sc: f64,
}

impl TradeoffPoint {
    pub fn total(&self) -> f64 {
        total_cost(self.pc, self.sc)
    }
}

/// Minimizes `max(f(cpgb) × qps, cpgb × data_gb)` over `cpgb ∈ [lo, hi]`
/// for a non-increasing trade-off `f`.
///
/// The performance side falls and the space side rises with `cpgb`, so the
/// optimum is their crossing, located by bisection. When they do not cross
/// inside the interval the nearer endpoint is returned.
pub fn solve_tradeoff<F>(
    f: F,
    cpgb_range: (f64, f64),
    qps: f64,
    data_gb: f64,
) -> Result<TradeoffPoint, CostError>
where
    F: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = cpgb_range;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
        return Err(invalid("cpgb_range", format!("bad interval [{lo}, {hi}]")));
    }
    require_finite_nonneg("qps", qps)?;
    require_finite_nonneg("data_gb", data_gb)?;
    let point = |x: f64| {
        let cpqps = f(x);
        TradeoffPoint {
            cpgb: x,
            cpqps,
            pc: cpqps * qps,
            sc: x * data_gb,
        }
    };
    let gap = |p: &TradeoffPoint| p.pc - p.sc;

    let (p_lo, p_hi) = (point(lo), point(hi));
    if gap(&p_lo) <= 0.0 {
        return Ok(p_lo);
    }
    if gap(&p_hi) >= 0.0 {
        return Ok(p_hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(&point(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (point(lo), point(hi));
    Ok(if gap(&a).abs() <= gap(&b).abs() { a } else { b })
}

/// The inputs of the two-tier cost formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TieredCostParams {
    pub pc_cache: f64,
    /// Additional performance cost incurred per unit of miss ratio.
    pub pc_miss: f64,
    pub pc_storage: f64,
    /// Space cost of holding the entire dataset in the cache tier.
    pub sc_cache: f64,
    pub sc_storage: f64,
    /// Cache capacity divided by total data capacity.
    pub cr: f64,
    /// Fraction of requests served by the storage tier.
    pub mr: f64,
}

impl TieredCostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        require_finite_nonneg("pc_cache", self.pc_cache)?;
        require_finite_nonneg("pc_miss", self.pc_miss)?;
        require_finite_nonneg("pc_storage", self.pc_storage)?;
        require_finite_nonneg("sc_cache", self.sc_cache)?;
        require_finite_nonneg("sc_storage", self.sc_storage)?;
        require_fraction("cr", self.cr)?;
        require_fraction("mr", self.mr)
    }

    pub fn cache_tier_performance(&self) -> f64 {
        self.pc_cache + self.pc_miss * self.mr
    }

    pub fn cache_tier_space(&self) -> f64 {
        self.sc_cache * self.cr
    }

    pub fn storage_tier_performance(&self) -> f64 {
        self.pc_storage * self.mr
    }

    pub fn cache_tier_cost(&self) -> f64 {
        total_cost(self.cache_tier_performance(), self.cache_tier_space())
    }

    pub fn storage_tier_cost(&self) -> f64 {
        total_cost(self.storage_tier_performance(), self.sc_storage)
    }
}

/// `max(PC_cache + PC_miss·MR, SC_cache·CR) + max(PC_storage·MR, SC_storage)`.
pub fn tiered_cost(p: &TieredCostParams) -> f64 {
    p.cache_tier_cost() + p.storage_tier_cost()
}

/// True when the storage tier's cost is set by its space rather than by the
/// miss traffic it serves, i.e. `mr < sc_storage / pc_storage`.
pub fn storage_tier_sc_dominates(mr: f64, sc_storage: f64, pc_storage: f64) -> bool {
    mr < sc_storage / pc_storage
}

/// A miss ratio as a function of cache ratio.
pub trait MissRatioFn {
    fn miss_ratio(&self, cache_ratio: f64) -> f64;
}

impl<F: Fn(f64) -> f64> MissRatioFn for F {
    fn miss_ratio(&self, cache_ratio: f64) -> f64 {
        self(cache_ratio)
    }
}

/// Result of the cache-ratio optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheRatioOptimum {
    pub cr: f64,
    pub miss_ratio: f64,
    /// `max(g(cr), h(cr))` at the optimum.
    pub cost: f64,
    /// Set when the optimum is a continuous crossing of `g` and `h`; clear
    /// when it is a grid point (discontinuous `f`, or no crossing in range).
    pub crossing: bool,
}

/// Finds the cache ratio minimizing the cache-tier cost
/// `max(pc_cache + pc_miss·f(cr), sc_cache·cr)`.
///
/// A 1e-4 grid brackets the optimum; when `g − h` changes sign continuously
/// inside the bracket, bisection pins the crossing. Otherwise the grid
/// minimizer (the largest ratio among equal-cost points) is returned.
pub fn optimal_cache_ratio<F: MissRatioFn + ?Sized>(
    f: &F,
    pc_cache: f64,
    pc_miss: f64,
    sc_cache: f64,
) -> Result<CacheRatioOptimum, CostError> {
    require_finite_nonneg("pc_cache", pc_cache)?;
    require_finite_nonneg("pc_miss", pc_miss)?;
    require_positive("sc_cache", sc_cache)?;

    let g = |cr: f64| pc_cache + pc_miss * f.miss_ratio(cr);
    let h = |cr: f64| sc_cache * cr;
    let grid = |i: usize| i as f64 / GRID_POINTS as f64;

    let mut f_prev = f.miss_ratio(0.0);
    let mut best_i = 0usize;
    let mut best_cost = g(0.0).max(0.0);
    let mut first_nonpositive: Option<usize> = None;
    for i in 0..=GRID_POINTS {
        let cr = grid(i);
        let fv = f.miss_ratio(cr);
        if fv > f_prev + MONOTONE_TOLERANCE {
            return Err(CostError::InvalidCurve { at: cr });
        }
        f_prev = fv;
        let (gv, hv) = (pc_cache + pc_miss * fv, h(cr));
        let cost = gv.max(hv);
        if cost <= best_cost {
            best_cost = cost;
            best_i = i;
        }
        if first_nonpositive.is_none() && gv - hv <= 0.0 {
            first_nonpositive = Some(i);
        }
    }

    let grid_result = {
        let cr = grid(best_i);
        CacheRatioOptimum {
            cr,
            miss_ratio: f.miss_ratio(cr),
            cost: best_cost,
            crossing: false,
        }
    };

    let Some(j) = first_nonpositive else {
        return Ok(grid_result);
    };
    if j == 0 || g(grid(j)) == h(grid(j)) {
        let cr = grid(j);
        let cost = g(cr).max(h(cr));
        if cost <= best_cost {
            return Ok(CacheRatioOptimum {
                cr,
                miss_ratio: f.miss_ratio(cr),
                cost,
                crossing: true,
            });
        }
        return Ok(grid_result);
    }

    let (mut lo, mut hi) = (grid(j - 1), grid(j));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) - h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gap = |x: f64| (g(x) - h(x)).abs();
    let x = if gap(lo) <= gap(hi) { lo } else { hi };
    let cost = g(x).max(h(x));
    let tol = 1e-12 * best_cost.abs().max(f64::MIN_POSITIVE);
    if gap(x) <= 1e-6 * sc_cache && cost <= best_cost + tol {
        Ok(CacheRatioOptimum {
            cr: x,
            miss_ratio: f.miss_ratio(x),
            cost,
            crossing: true,
        })
    } else {
        Ok(grid_result)
    }
}

/// Access interval at which fast and slow configurations cost the same.
///
/// Besides the interval itself, carries the quantities that play the roles
/// of the classic rule's terms: `cpqps_slow` stands for
/// `PricePerDiskDrive / AccessPerSecondPerDisk`, `cpgb_fast` for
/// `PricePerMBofRAM`, and `records_per_gb` for `PagesPerMBofRAM`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreakEvenInterval {
    pub seconds: f64,
    pub cpqps_slow: f64,
    pub cpgb_fast: f64,
    pub records_per_gb: f64,
}

/// Which side of the break-even interval an access pattern falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Accessed more often than the break-even interval.
    Fast,
    Slow,
}

impl BreakEvenInterval {
    pub fn placement(&self, access_interval_s: f64) -> Placement {
        if access_interval_s < self.seconds {
            Placement::Fast
        } else {
            Placement::Slow
        }
    }

    pub fn mapping_note(&self) -> String {
        format!(
            "PricePerDiskDrive/AccessPerSecondPerDisk ~ CPQPS_slow = {}; \
             PricePerMBofRAM ~ CPGB_fast = {}; \
             PagesPerMBofRAM ~ 1GB/AverageRecordSize = {}",
            self.cpqps_slow, self.cpgb_fast, self.records_per_gb
        )
    }
}

/// `cpqps_slow / (cpgb_fast × avg_record_size_in_GB)` seconds.
pub fn break_even_interval(
    cpqps_slow: f64,
    cpgb_fast: f64,
    avg_record_size: f64,
) -> Result<BreakEvenInterval, CostError> {
    require_positive("cpqps_slow", cpqps_slow)?;
    require_positive("cpgb_fast", cpgb_fast)?;
    require_positive("avg_record_size", avg_record_size)?;
    let records_per_gb = GB / avg_record_size;
    Ok(BreakEvenInterval {
        seconds: cpqps_slow * records_per_gb / cpgb_fast,
        cpqps_slow,
        cpgb_fast,
        records_per_gb,
    })
}

/// Observable workload features that suggest particular optimizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadFeature {
    SkewedAccess,
    LowLatency,
    SpaceCritical,
    PerformanceCritical,
    ReadHeavy,
    WriteHeavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizationOption {
    TieredStorage,
    ElasticThreading,
    InMemoryMode,
    PersistentMemory,
    LargerStorageInstance,
    PretrainedCompression,
    PersistentMemoryWal,
    WriteBackCaching,
}

/// Configuration guidance: which options address a given workload feature.
pub fn suggested_options(feature: WorkloadFeature) -> &'static [OptimizationOption] {
    use OptimizationOption::*;
    match feature {
        WorkloadFeature::SkewedAccess => &[TieredStorage, ElasticThreading],
        WorkloadFeature::LowLatency => &[InMemoryMode, PersistentMemory],
        WorkloadFeature::SpaceCritical => {
            &[LargerStorageInstance, TieredStorage, PretrainedCompression]
        }
        WorkloadFeature::PerformanceCritical => &[InMemoryMode, PersistentMemoryWal],
        WorkloadFeature::ReadHeavy => &[ElasticThreading, PretrainedCompression],
        WorkloadFeature::WriteHeavy => &[WriteBackCaching, PersistentMemoryWal],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: f64 = GB;

    fn profile(qps: f64, data: f64) -> WorkloadProfile {
        WorkloadProfile::new(qps, data, 1024.0, 0.5).unwrap()
    }

    fn inst(cost: f64) -> InstanceSpec {
        InstanceSpec::new(cost, 4, 16 << 30).unwrap()
    }

    #[test]
    fn performance_cost_examples() {
        let m = ConfigMeasurement::new("s", 120_000.0, GIB).unwrap();
        assert_eq!(performance_cost(&profile(80_000.0, 0.0), &inst(1.0), &m), 1.0);
        assert_eq!(performance_cost(&profile(500_000.0, 0.0), &inst(2.0), &m), 10.0);
        assert_eq!(performance_cost(&profile(0.0, 0.0), &inst(2.0), &m), 0.0);
    }

    #[test]
    fn space_cost_examples() {
        let m = ConfigMeasurement::new("s", 1.0, 4.0 * GIB).unwrap();
        assert_eq!(space_cost(&profile(0.0, 10.0 * GIB), &inst(1.0), &m), 3.0);
        assert_eq!(space_cost(&profile(0.0, 0.0), &inst(1.0), &m), 0.0);
        assert_eq!(space_cost(&profile(0.0, 4.0 * GIB), &inst(3.0), &m), 3.0);
    }

    #[test]
    fn continuous_model_drops_ceiling() {
        let m = ConfigMeasurement::new("s", 120_000.0, 4.0 * GIB).unwrap();
        let p = profile(500_000.0, 10.0 * GIB);
        let b = CostModel::CONTINUOUS.evaluate(&p, &inst(2.0), &m);
        assert!((b.pc - 2.0 * 500_000.0 / 120_000.0).abs() < 1e-12);
        assert!((b.sc - 5.0).abs() < 1e-12);
        assert_eq!(b.class, Classification::PerformanceCritical);
    }

    #[test]
    fn headroom_derates_ceilings() {
        let m = ConfigMeasurement::new("s", 100.0, 200.0).unwrap();
        let d = m.with_headroom(0.85, 0.5).unwrap();
        assert!((d.max_perf - 85.0).abs() < 1e-12);
        assert_eq!(d.max_space, 100.0);
        assert!(m.with_headroom(0.0, 1.0).is_err());
        assert!(m.with_headroom(1.0, 1.5).is_err());
    }

    #[test]
    fn total_and_classification() {
        assert_eq!(total_cost(1.0, 3.0), 3.0);
        assert_eq!(total_cost(0.1223, 0.4036), 0.4036);
        assert_eq!(total_cost(2.0, 2.0), 2.0);
        assert_eq!(classify_workload(5.0, 1.0), Classification::PerformanceCritical);
        assert_eq!(classify_workload(1.0, 5.0), Classification::SpaceCritical);
        assert_eq!(classify_workload(2.0, 2.0), Classification::Balanced);
        assert_eq!(classify_workload(2.0, 2.0 * (1.0 + 1e-12)), Classification::Balanced);
        assert_eq!(classify_workload(0.0, 0.0), Classification::Balanced);
    }

    #[test]
    fn select_optimal_examples() {
        let set = vec![
            ConfigCost::new("s1", 5.0, 1.0),
            ConfigCost::new("s2", 3.0, 2.0),
            ConfigCost::new("s3", 2.5, 2.6),
            ConfigCost::new("s4", 1.0, 6.0),
        ];
        assert_eq!(select_optimal_config(&set).unwrap().config_id, "s3");
        let single = vec![ConfigCost::new("s1", 4.0, 4.0)];
        assert_eq!(select_optimal_config(&single).unwrap().config_id, "s1");
        let tie = vec![ConfigCost::new("s1", 3.0, 3.0), ConfigCost::new("s2", 3.0, 3.0)];
        assert_eq!(select_optimal_config(&tie).unwrap().config_id, "s1");
        assert_eq!(select_optimal_config(&[]), Err(CostError::EmptyConfigSet));
    }

    #[test]
    fn select_prefers_balance_on_equal_max() {
        let set = vec![ConfigCost::new("a", 3.0, 1.0), ConfigCost::new("b", 2.9, 3.0)];
        assert_eq!(select_optimal_config(&set).unwrap().config_id, "b");
    }

    #[test]
    fn tiered_cost_examples() {
        let p = TieredCostParams {
            pc_cache: 2.0,
            pc_miss: 1.0,
            pc_storage: 5.0,
            sc_cache: 10.0,
            sc_storage: 1.0,
            cr: 0.1,
            mr: 0.2,
        };
        p.validate().unwrap();
        assert!((tiered_cost(&p) - 3.2).abs() < 1e-12);
        let full = TieredCostParams { mr: 0.0, cr: 1.0, ..p };
        assert_eq!(tiered_cost(&full), 10.0f64.max(2.0) + 1.0);
        let zero = TieredCostParams {
            pc_cache: 0.0,
            pc_miss: 0.0,
            pc_storage: 0.0,
            sc_cache: 0.0,
            sc_storage: 0.0,
            cr: 0.0,
            mr: 0.0,
        };
        assert_eq!(tiered_cost(&zero), 0.0);
        assert!(TieredCostParams { cr: 1.5, ..p }.validate().is_err());
    }

    #[test]
    fn optimal_cache_ratio_linear_curve() {
        let f = |cr: f64| 1.0 - cr;
        let r = optimal_cache_ratio(&f, 1.0, 4.0, 10.0).unwrap();
        assert!(r.crossing);
        assert!((r.cr - 5.0 / 14.0).abs() < 1e-9, "{}", r.cr);
        assert!((r.cost - 50.0 / 14.0).abs() < 1e-8);
    }

    #[test]
    fn optimal_cache_ratio_constant_miss_cost() {
        let f = |cr: f64| 1.0 - cr;
        let r = optimal_cache_ratio(&f, 3.0, 0.0, 10.0).unwrap();
        assert!((r.cr - 0.3).abs() < 1e-9);
        let clamped = optimal_cache_ratio(&f, 30.0, 0.0, 10.0).unwrap();
        assert_eq!(clamped.cr, 1.0);
        assert_eq!(clamped.cost, 30.0);
    }

    #[test]
    fn optimal_cache_ratio_step_curve() {
        let f = |cr: f64| if cr < 0.5 { 1.0 } else { 0.0 };
        let r = optimal_cache_ratio(&f, 1.0, 2.0, 4.0).unwrap();
        assert!(!r.crossing);
        assert_eq!(r.cr, 0.5);
        assert_eq!(r.cost, 2.0);
    }

    #[test]
    fn optimal_cache_ratio_rejects_increasing_curve() {
        let f = |cr: f64| cr;
        assert!(matches!(
            optimal_cache_ratio(&f, 1.0, 1.0, 1.0),
            Err(CostError::InvalidCurve { .. })
        ));
        let g = |cr: f64| 1.0 - cr;
        assert_eq!(
            optimal_cache_ratio(&g, 1.0, 1.0, 0.0),
            Err(CostError::NonPositiveInput("sc_cache"))
        );
    }

    #[test]
    fn break_even_examples() {
        let b = break_even_interval(1e-5, 0.05, 1024.0).unwrap();
        let expected = 1e-5 / (0.05 * (1024.0 / GIB));
        assert!((b.seconds - expected).abs() <= 1e-12 * expected);
        assert!((b.seconds - 209.7152).abs() < 1e-3);
        let doubled = break_even_interval(1e-5, 0.05, 2048.0).unwrap();
        assert!((doubled.seconds * 2.0 - b.seconds).abs() < 1e-9);
        let unit = break_even_interval(0.05, 0.05, GIB).unwrap();
        assert!((unit.seconds - 1.0).abs() < 1e-12);
        assert_eq!(b.placement(10.0), Placement::Fast);
        assert_eq!(b.placement(1000.0), Placement::Slow);
        assert!(b.mapping_note().contains("CPQPS_slow"));
        assert_eq!(
            break_even_interval(0.0, 1.0, 1.0),
            Err(CostError::NonPositiveInput("cpqps_slow"))
        );
    }

    #[test]
    fn storage_tier_dominance() {
        assert!(storage_tier_sc_dominates(0.1, 1.0, 5.0));
        assert!(!storage_tier_sc_dominates(0.5, 1.0, 5.0));
        assert!(storage_tier_sc_dominates(0.0, 0.3, 5.0));
    }

    #[test]
    fn solve_tradeoff_finds_balance() {
        let f = |x: f64| 1.0 / x;
        let p = solve_tradeoff(f, (1e-3, 1e3), 100.0, 4.0).unwrap();
        assert!((p.pc - p.sc).abs() <= 1e-6 * (p.pc + p.sc));
        assert!((p.cpgb - 5.0).abs() < 1e-6);
        // no crossing inside: space side dominates everywhere
        let q = solve_tradeoff(f, (10.0, 20.0), 100.0, 4.0).unwrap();
        assert_eq!(q.cpgb, 10.0);
    }

    #[test]
    fn profile_validation() {
        assert!(WorkloadProfile::new(-1.0, 0.0, 1.0, 0.5).is_err());
        assert!(WorkloadProfile::new(1.0, 0.0, 0.0, 0.5).is_err());
        assert!(WorkloadProfile::new(1.0, 0.0, 1.0, 1.5).is_err());
        assert!(InstanceSpec::new(0.0, 1, 1).is_err());
        assert!(ConfigMeasurement::new("x", 0.0, 1.0).is_err());
    }

    #[test]
    fn guidance_table() {
        assert!(suggested_options(WorkloadFeature::WriteHeavy)
            .contains(&OptimizationOption::WriteBackCaching));
        assert!(suggested_options(WorkloadFeature::SpaceCritical)
            .contains(&OptimizationOption::PretrainedCompression));
    }
}
