//! Exact ground truth and the evaluation metrics.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::hashing::{FlowKey, LayerHasher};
use crate::sketch::{Scheme, Sketch, SketchConfig, SketchError};
use crate::traces::PacketRecord;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("relative error is undefined for an actual value of zero")]
    ZeroActual,
}

/// Exact per-flow packet counts for one epoch, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    counts: IndexMap<FlowKey, u64>,
    total: u64,
}

impl GroundTruth {
    pub fn from_packets(packets: &[PacketRecord]) -> Self {
        Self::from_keys(packets.iter().map(|p| &p.key))
    }

    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a FlowKey>) -> Self {
        let mut gt = GroundTruth::default();
        for k in keys {
            gt.add(k);
        }
        gt
    }

    pub fn add(&mut self, key: &FlowKey) {
        match self.counts.get_mut(key) {
            Some(c) => *c += 1,
            None => {
                self.counts.insert(key.clone(), 1);
            }
        }
        self.total += 1;
    }

    pub fn count(&self, key: &FlowKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn flows(&self) -> impl Iterator<Item = (&FlowKey, u64)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    pub fn n_flows(&self) -> usize {
        self.counts.len()
    }

    pub fn total_packets(&self) -> u64 {
        self.total
    }

    /// `||a^j||` for each layer: the packets of flows at least as large as
    /// the limit of the layer below (`T_0 = 0`). `limits` holds `T_1..T_d`.
    pub fn truncated_sums(&self, limits: &[u64]) -> Vec<u64> {
        (0..limits.len())
            .map(|j| {
                let floor = if j == 0 { 0 } else { limits[j - 1] };
                self.counts.values().filter(|&&a| a >= floor).sum()
            })
            .collect()
    }

    /// Number of flows of each size.
    pub fn distribution(&self) -> BTreeMap<u64, u64> {
        let mut d = BTreeMap::new();
        for &a in self.counts.values() {
            *d.entry(a).or_default() += 1;
        }
        d
    }

    /// Flows with at least `threshold` packets.
    pub fn heavy(&self, threshold: u64) -> HashSet<FlowKey> {
        self.counts
            .iter()
            .filter(|(_, &a)| a >= threshold)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Mean of `|f̂ - f| / f` over all flows of the truth.
pub fn are(truth: &GroundTruth, mut estimate: impl FnMut(&FlowKey) -> u64) -> f64 {
    if truth.n_flows() == 0 {
        return 0.0;
    }
    let sum: f64 = truth
        .flows()
        .map(|(k, a)| (estimate(k) as f64 - a as f64).abs() / a as f64)
        .sum();
    sum / truth.n_flows() as f64
}

/// Weighted mean relative error between two size distributions.
pub fn wmre(truth: &BTreeMap<u64, u64>, estimate: &BTreeMap<u64, u64>) -> f64 {
    let sizes: std::collections::BTreeSet<u64> = truth.keys().chain(estimate.keys()).copied().collect();
    let (mut num, mut den) = (0.0, 0.0);
    for s in sizes {
        let n = truth.get(&s).copied().unwrap_or(0) as f64;
        let e = estimate.get(&s).copied().unwrap_or(0) as f64;
        num += (n - e).abs();
        den += (n + e) / 2.0;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `|1 - estimated / actual|`.
pub fn relative_error(actual: f64, estimated: f64) -> Result<f64, MetricError> {
    if actual == 0.0 {
        return Err(MetricError::ZeroActual);
    }
    Ok((1.0 - estimated / actual).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `reported` against `truth`.
///
/// An empty report scores 0 precision. Two empty sets score 1 everywhere.
pub fn f1<T: Eq + Hash>(reported: &HashSet<T>, truth: &HashSet<T>) -> F1Score {
    if reported.is_empty() && truth.is_empty() {
        return F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hits = reported.intersection(truth).count() as f64;
    let precision = if reported.is_empty() {
        0.0
    } else {
        hits / reported.len() as f64
    };
    let recall = if truth.is_empty() {
        1.0
    } else {
        hits / truth.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        precision,
        recall,
        f1,
    }
}

/// Size buckets and survival thresholds for the flow survival rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBuckets {
    /// First size counted as a medium flow.
    pub medium_from: u64,
    /// First size counted as an elephant flow.
    pub elephant_from: u64,
    /// Relative error a flow must stay strictly below, per bucket.
    pub thresholds: [f64; 3],
}

impl Default for SurvivalBuckets {
    fn default() -> Self {
        SurvivalBuckets {
            medium_from: 255,
            elephant_from: 65_535,
            thresholds: [0.1, 0.05, 0.01],
        }
    }
}

impl SurvivalBuckets {
    pub fn bucket(&self, size: u64) -> usize {
        if size >= self.elephant_from {
            2
        } else if size >= self.medium_from {
            1
        } else {
            0
        }
    }
}

/// Fraction of flows per bucket (mouse, medium, elephant) whose relative
/// error is below the bucket threshold. `None` for empty buckets.
pub fn fsr(
    truth: &GroundTruth,
    mut estimate: impl FnMut(&FlowKey) -> u64,
    buckets: &SurvivalBuckets,
) -> [Option<f64>; 3] {
    let mut total = [0u64; 3];
    let mut survived = [0u64; 3];
    for (k, a) in truth.flows() {
        let b = buckets.bucket(a);
        total[b] += 1;
        let re = (estimate(k) as f64 - a as f64).abs() / a as f64;
        if re < buckets.thresholds[b] {
            survived[b] += 1;
        }
    }
    std::array::from_fn(|b| (total[b] > 0).then(|| survived[b] as f64 / total[b] as f64))
}

/// Bits needed to represent `v`, i.e. `ceil(log2(v + 1))`.
pub fn bits_needed(v: u64) -> u32 {
    64 - v.leading_zeros()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWaste {
    pub counter_bits: u32,
    /// `histogram[k]` = counters wasting exactly `k` high bits.
    pub histogram: Vec<u64>,
    pub wasted_bits: u64,
    pub total_bits: u64,
}

impl LayerWaste {
    pub fn wasted_fraction(&self) -> f64 {
        if self.total_bits == 0 {
            0.0
        } else {
            self.wasted_bits as f64 / self.total_bits as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WastedBits {
    pub layers: Vec<LayerWaste>,
}

impl WastedBits {
    pub fn wasted_fraction(&self) -> f64 {
        let w: u64 = self.layers.iter().map(|l| l.wasted_bits).sum();
        let t: u64 = self.layers.iter().map(|l| l.total_bits).sum();
        if t == 0 {
            0.0
        } else {
            w as f64 / t as f64
        }
    }
}

/// Per-layer distribution of unused high-order counter bits.
pub fn wasted_bits<H: LayerHasher>(sketch: &Sketch<H>) -> WastedBits {
    let layers = (0..sketch.depth())
        .map(|l| {
            let arr = sketch.layer(l);
            let b = arr.bits();
            let mut histogram = vec![0u64; b as usize + 1];
            let mut wasted = 0u64;
            for v in arr.iter() {
                let w = b - bits_needed(v);
                histogram[w as usize] += 1;
                wasted += w as u64;
            }
            LayerWaste {
                counter_bits: b,
                histogram,
                wasted_bits: wasted,
                total_bits: arr.len() as u64 * b as u64,
            }
        })
        .collect();
    WastedBits { layers }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scheme: Scheme,
    pub packets: u64,
    pub mpps_median: f64,
    pub mpps_runs: Vec<f64>,
    /// Mean counter increments per packet (deterministic).
    pub writes_per_packet: f64,
}

/// Encodes `trace` into a fresh sketch `reps` times (after one warm-up pass)
/// and reports the median packet rate.
pub fn throughput_bench(
    config: &SketchConfig,
    trace: &[PacketRecord],
    reps: usize,
) -> Result<BenchResult, SketchError> {
    let reps = reps.max(3);
    let mut sketch = Sketch::new(config.clone())?;
    let mut writes = 0u64;
    for p in trace {
        if let Ok(r) = sketch.encode(&p.key) {
            writes += r.writes as u64;
        }
    }
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        sketch.clear();
        let start = Instant::now();
        for p in trace {
            let _ = std::hint::black_box(sketch.encode(std::hint::black_box(&p.key)));
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        runs.push(trace.len() as f64 / secs / 1e6);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    let packets = trace.len() as u64;
    Ok(BenchResult {
        scheme: config.scheme,
        packets,
        mpps_median: sorted[sorted.len() / 2],
        mpps_runs: runs,
        writes_per_packet: if packets == 0 {
            0.0
        } else {
            writes as f64 / packets as f64
        },
    })
}

pub const FORMAT_VERSION: u32 = 1;

/// Every metric for one (scheme, memory, seed, epoch) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub format_version: u32,
    pub scheme: Scheme,
    pub memory_bytes: u64,
    pub layers: usize,
    pub expansion: u64,
    pub seed: u64,
    pub epoch: usize,
    pub widths: Vec<usize>,
    pub packets: u64,
    pub flows: u64,
    pub are: f64,
    pub cardinality_estimate: Option<f64>,
    pub cardinality_re: Option<f64>,
    pub wmre: f64,
    pub entropy_true: Option<f64>,
    pub entropy_estimate: Option<f64>,
    pub entropy_re: Option<f64>,
    pub hh_threshold: u64,
    pub hh: F1Score,
    pub hc: Option<F1Score>,
    pub fsr: [Option<f64>; 3],
    pub throughput_mpps: Option<f64>,
    pub writes_per_packet: f64,
    pub table_full_events: u64,
    pub negative_buckets: u64,
    pub bound_exceedance: f64,
    pub wasted: WastedBits,
}

/// Flat CSV view of an [`EpochReport`]. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub scheme: Scheme,
    pub memory_bytes: u64,
    pub memory_mb: f64,
    pub layers: usize,
    pub expansion: u64,
    pub seed: u64,
    pub epoch: usize,
    pub widths: String,
    pub packets: u64,
    pub flows: u64,
    pub are: f64,
    pub cardinality_estimate: Option<f64>,
    pub cardinality_re: Option<f64>,
    pub wmre: f64,
    pub entropy_true: Option<f64>,
    pub entropy_estimate: Option<f64>,
    pub entropy_re: Option<f64>,
    pub hh_threshold: u64,
    pub hh_precision: f64,
    pub hh_recall: f64,
    pub hh_f1: f64,
    pub hc_precision: Option<f64>,
    pub hc_recall: Option<f64>,
    pub hc_f1: Option<f64>,
    pub fsr_mouse: Option<f64>,
    pub fsr_medium: Option<f64>,
    pub fsr_elephant: Option<f64>,
    pub throughput_mpps: Option<f64>,
    pub writes_per_packet: f64,
    pub table_full_events: u64,
    pub negative_buckets: u64,
    pub bound_exceedance: f64,
    pub wasted_fraction: f64,
    pub wasted_fraction_per_layer: String,
}

pub const CSV_COLUMNS: &[&str] = &[
    "scheme",
    "memory_bytes",
    "memory_mb",
    "layers",
    "expansion",
    "seed",
    "epoch",
    "widths",
    "packets",
    "flows",
    "are",
    "cardinality_estimate",
    "cardinality_re",
    "wmre",
    "entropy_true",
    "entropy_estimate",
    "entropy_re",
    "hh_threshold",
    "hh_precision",
    "hh_recall",
    "hh_f1",
    "hc_precision",
    "hc_recall",
    "hc_f1",
    "fsr_mouse",
    "fsr_medium",
    "fsr_elephant",
    "throughput_mpps",
    "writes_per_packet",
    "table_full_events",
    "negative_buckets",
    "bound_exceedance",
    "wasted_fraction",
    "wasted_fraction_per_layer",
];

impl EpochReport {
    pub fn row(&self) -> EpochRow {
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(";");
        EpochRow {
            scheme: self.scheme,
            memory_bytes: self.memory_bytes,
            memory_mb: self.memory_bytes as f64 / (1u64 << 20) as f64,
            layers: self.layers,
            expansion: self.expansion,
            seed: self.seed,
            epoch: self.epoch,
            widths: join(&mut self.widths.iter().map(|w| w.to_string())),
            packets: self.packets,
            flows: self.flows,
            are: self.are,
            cardinality_estimate: self.cardinality_estimate,
            cardinality_re: self.cardinality_re,
            wmre: self.wmre,
            entropy_true: self.entropy_true,
            entropy_estimate: self.entropy_estimate,
            entropy_re: self.entropy_re,
            hh_threshold: self.hh_threshold,
            hh_precision: self.hh.precision,
            hh_recall: self.hh.recall,
            hh_f1: self.hh.f1,
            hc_precision: self.hc.map(|s| s.precision),
            hc_recall: self.hc.map(|s| s.recall),
            hc_f1: self.hc.map(|s| s.f1),
            fsr_mouse: self.fsr[0],
            fsr_medium: self.fsr[1],
            fsr_elephant: self.fsr[2],
            throughput_mpps: self.throughput_mpps,
            writes_per_packet: self.writes_per_packet,
            table_full_events: self.table_full_events,
            negative_buckets: self.negative_buckets,
            bound_exceedance: self.bound_exceedance,
            wasted_fraction: self.wasted.wasted_fraction(),
            wasted_fraction_per_layer: join(
                &mut self
                    .wasted
                    .layers
                    .iter()
                    .map(|l| format!("{:.6}", l.wasted_fraction())),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::IdentityHasher;

    fn k(i: u64) -> FlowKey {
        FlowKey::from_u64(i)
    }

    fn truth(pairs: &[(u64, u64)]) -> GroundTruth {
        let mut gt = GroundTruth::default();
        for &(key, n) in pairs {
            for _ in 0..n {
                gt.add(&k(key));
            }
        }
        gt
    }

    #[test]
    fn are_examples() {
        let gt = truth(&[(1, 2), (2, 4)]);
        assert_eq!(are(&gt, |f| gt.count(f)), 0.0);
        let est = |f: &FlowKey| if *f == k(1) { 3 } else { 4 };
        assert!((are(&gt, est) - 0.25).abs() < 1e-15);
        let gt = truth(&[(1, 1)]);
        assert!((are(&gt, |_| 3) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wmre_examples() {
        let t: BTreeMap<u64, u64> = [(1, 2), (2, 1)].into();
        assert_eq!(wmre(&t, &t), 0.0);
        let e: BTreeMap<u64, u64> = [(1, 1), (2, 2)].into();
        assert!((wmre(&t, &e) - 2.0 / 3.0).abs() < 1e-12);
        assert!((wmre(&t, &BTreeMap::new()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(10.0, 10.0), Ok(0.0));
        assert!((relative_error(100.0, 90.0).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(relative_error(0.0, 5.0), Err(MetricError::ZeroActual));
    }

    #[test]
    fn f1_examples() {
        let t: HashSet<u32> = [1].into();
        let s = f1(&t, &t);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let r: HashSet<u32> = [1, 2].into();
        let s = f1(&r, &t);
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        let s = f1(&HashSet::new(), &t);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn fsr_examples() {
        let b = SurvivalBuckets::default();
        let gt = truth(&[(1, 5), (2, 300), (3, 70_000)]);
        let exact = fsr(&gt, |f| gt.count(f), &b);
        assert_eq!(exact, [Some(1.0), Some(1.0), Some(1.0)]);

        let gt = truth(&[(1, 10)]);
        assert_eq!(fsr(&gt, |_| 11, &b), [Some(0.0), None, None]);

        let gt = truth(&[(1, 100_000)]);
        assert_eq!(fsr(&gt, |_| 100_500, &b), [None, None, Some(1.0)]);
    }

    #[test]
    fn bucket_edges() {
        let b = SurvivalBuckets::default();
        assert_eq!(
            [1, 254, 255, 65_534, 65_535].map(|s| b.bucket(s)),
            [0, 0, 1, 1, 2]
        );
    }

    #[test]
    fn bits_needed_matches_ceil_log2() {
        assert_eq!(bits_needed(0), 0);
        assert_eq!(bits_needed(5), 3);
        assert_eq!(bits_needed(255), 8);
        assert_eq!(bits_needed(256), 9);
        for v in 1..5000u64 {
            assert_eq!(bits_needed(v), ((v + 1) as f64).log2().ceil() as u32);
        }
    }

    #[test]
    fn wasted_bits_histogram() {
        let cfg = SketchConfig::new(Scheme::SplitMU, 3, 3, 2, 0).with_top_bits(8);
        let mut s = Sketch::with_hasher(cfg, IdentityHasher).unwrap();
        s.set_counter(2, 0, 5).unwrap();
        let w = wasted_bits(&s);
        assert_eq!(w.layers[2].histogram[5], 1);
        assert_eq!(w.layers[2].wasted_bits, 5);
        assert_eq!(w.layers[0].histogram[2], 4);
        s.set_counter(2, 0, 255).unwrap();
        assert_eq!(wasted_bits(&s).layers[2].wasted_bits, 0);
        s.set_counter(2, 0, 0).unwrap();
        assert_eq!(wasted_bits(&s).wasted_fraction(), 1.0);
    }

    #[test]
    fn truncated_sums_against_recount() {
        let gt = truth(&[(1, 1), (2, 3), (3, 10), (4, 20), (5, 300)]);
        let limits = [3, 15, 255];
        let sums = gt.truncated_sums(&limits);
        // brute force
        let expect: Vec<u64> = [0u64, 3, 15]
            .iter()
            .map(|&floor| [1u64, 3, 10, 20, 300].iter().filter(|&&a| a >= floor).sum())
            .collect();
        assert_eq!(sums, expect);
        assert_eq!(sums[0], gt.total_packets());
        assert!(sums.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn bench_reports_positive_rate_and_exact_writes() {
        let cfg = SketchConfig::new(Scheme::FlatCM, 1 << 16, 3, 0, 1);
        let trace: Vec<_> = (0..5000u64)
            .map(|i| PacketRecord::new(FlowKey::from_u64(i % 97)))
            .collect();
        let r = throughput_bench(&cfg, &trace, 3).unwrap();
        assert!(r.mpps_median > 0.0);
        assert_eq!(r.mpps_runs.len(), 3);
        assert_eq!(r.writes_per_packet, 3.0);
        let mu = throughput_bench(&SketchConfig::new(Scheme::SplitMU, 1 << 16, 3, 4, 1), &trace, 3).unwrap();
        let cm = throughput_bench(&SketchConfig::new(Scheme::SplitCM, 1 << 16, 3, 4, 1), &trace, 3).unwrap();
        assert!(mu.writes_per_packet <= cm.writes_per_packet);
    }
}
