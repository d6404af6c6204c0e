//! Measurement applications built on a sketch: flow size, cardinality,
//! flow size distribution, entropy, heavy hitters and heavy changers.

use std::collections::{BTreeMap, HashSet};

use indexmap::IndexMap;

use crate::hashing::{FlowKey, LayerHasher};
use crate::sketch::{EncodeResult, Sketch, SketchError};

/// Largest flow size tracked by the distribution array.
pub const MAX_TRACKED_SIZE: usize = 255;

/// Bytes per label-table entry: a 13-byte 5-tuple plus a 32-bit size.
pub const LABEL_ENTRY_BYTES: usize = 17;

/// Default label-table budget in bytes.
pub const DEFAULT_TABLE_BYTES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error("label table full ({capacity} entries); flow not labelled")]
    TableFull {
        capacity: usize,
        result: EncodeResult,
    },
    #[error("every lowest-layer counter is non-zero; linear counting has no estimate")]
    LcSaturated,
    #[error("distribution bucket {size} is negative (inc {inc}, dec {dec})")]
    NegativeBucket { size: usize, inc: u64, dec: u64 },
    #[error("epoch has no flows")]
    EmptyEpoch,
    #[error("epoch snapshots use different sketch configurations")]
    MismatchedEpochs,
}

/// Two counter arrays whose difference is the number of flows per size.
///
/// A packet that moves its flow's estimate to `n` adds one to `inc[n]` and
/// one to `dec[n - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributionArray {
    inc: Vec<u64>,
    dec: Vec<u64>,
}

impl Default for DistributionArray {
    fn default() -> Self {
        Self::new(MAX_TRACKED_SIZE)
    }
}

impl DistributionArray {
    pub fn new(max_size: usize) -> Self {
        DistributionArray {
            inc: vec![0; max_size + 1],
            dec: vec![0; max_size + 1],
        }
    }

    pub fn max_size(&self) -> usize {
        self.inc.len() - 1
    }

    pub fn record(&mut self, estimate: u64) {
        let max = self.max_size() as u64;
        if (1..=max).contains(&estimate) {
            self.inc[estimate as usize] += 1;
        }
        if (1..=max).contains(&estimate.wrapping_sub(1)) {
            self.dec[estimate as usize - 1] += 1;
        }
    }

    pub fn inc(&self, size: usize) -> u64 {
        self.inc[size]
    }

    pub fn dec(&self, size: usize) -> u64 {
        self.dec[size]
    }

    pub fn clear(&mut self) {
        self.inc.iter_mut().for_each(|c| *c = 0);
        self.dec.iter_mut().for_each(|c| *c = 0);
    }
}

/// Exact map from flow key to its latest estimate, for flows whose
/// estimate reached the threshold. New keys are rejected once full.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    capacity: usize,
    threshold: u64,
    entries: IndexMap<FlowKey, u64>,
    rejected: u64,
}

impl LabelTable {
    pub fn new(capacity: usize, threshold: u64) -> Self {
        LabelTable {
            capacity,
            threshold: threshold.max(1),
            entries: IndexMap::new(),
            rejected: 0,
        }
    }

    /// Capacity of a table occupying `bytes`.
    pub fn capacity_for_bytes(bytes: usize) -> usize {
        bytes / LABEL_ENTRY_BYTES
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// New flows turned away because the table was full.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn get(&self, key: &FlowKey) -> Option<u64> {
        self.entries.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &FlowKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FlowKey, u64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    /// Stores `estimate` for `key` if it reaches the threshold. Returns
    /// `false` when a new key was turned away.
    pub fn offer(&mut self, key: &FlowKey, estimate: u64) -> bool {
        if estimate < self.threshold {
            return true;
        }
        if let Some(v) = self.entries.get_mut(key) {
            *v = estimate;
            return true;
        }
        if self.entries.len() >= self.capacity {
            self.rejected += 1;
            return false;
        }
        self.entries.insert(key.clone(), estimate);
        true
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.rejected = 0;
    }
}

/// Encodes one packet and updates the distribution array and label table.
/// On [`AppError::TableFull`] the packet has still been counted.
pub fn on_packet<H: LayerHasher>(
    sketch: &mut Sketch<H>,
    dist: &mut DistributionArray,
    table: &mut LabelTable,
    key: &FlowKey,
) -> Result<EncodeResult, AppError> {
    let result = sketch.encode(key)?;
    dist.record(result.estimate);
    if !table.offer(key, result.estimate) {
        return Err(AppError::TableFull {
            capacity: table.capacity(),
            result,
        });
    }
    Ok(result)
}

/// Linear-counting estimate of the number of distinct flows, using the
/// lowest layer as the bitmap.
pub fn cardinality<H: LayerHasher>(sketch: &Sketch<H>) -> Result<f64, AppError> {
    let lowest = sketch.layer(0);
    linear_counting(lowest.len(), lowest.count_zeros())
}

/// `-s·ln(zeros / s)`.
pub fn linear_counting(slots: usize, zeros: usize) -> Result<f64, AppError> {
    if zeros == 0 {
        return Err(AppError::LcSaturated);
    }
    if zeros == slots {
        return Ok(0.0);
    }
    let s = slots as f64;
    Ok(-s * (zeros as f64 / s).ln())
}

/// Estimated number of flows per size: `inc - dec` for tracked sizes, plus
/// one per labelled flow whose current query exceeds the tracked range.
/// Fails on a negative bucket.
pub fn flow_size_distribution<H: LayerHasher>(
    dist: &DistributionArray,
    table: &LabelTable,
    sketch: &Sketch<H>,
) -> Result<BTreeMap<u64, u64>, AppError> {
    let mut out = BTreeMap::new();
    for size in 1..=dist.max_size() {
        let (inc, dec) = (dist.inc(size), dist.dec(size));
        if inc < dec {
            return Err(AppError::NegativeBucket { size, inc, dec });
        }
        if inc > dec {
            out.insert(size as u64, inc - dec);
        }
    }
    add_labelled(&mut out, dist, table, sketch);
    Ok(out)
}

/// Like [`flow_size_distribution`] but negative buckets count as zero.
/// Also returns how many buckets were clamped.
pub fn flow_size_distribution_clamped<H: LayerHasher>(
    dist: &DistributionArray,
    table: &LabelTable,
    sketch: &Sketch<H>,
) -> (BTreeMap<u64, u64>, u64) {
    let mut out = BTreeMap::new();
    let mut clamped = 0;
    for size in 1..=dist.max_size() {
        let (inc, dec) = (dist.inc(size), dist.dec(size));
        if inc < dec {
            clamped += 1;
        } else if inc > dec {
            out.insert(size as u64, inc - dec);
        }
    }
    add_labelled(&mut out, dist, table, sketch);
    (out, clamped)
}

fn add_labelled<H: LayerHasher>(
    out: &mut BTreeMap<u64, u64>,
    dist: &DistributionArray,
    table: &LabelTable,
    sketch: &Sketch<H>,
) {
    for key in table.keys() {
        let q = sketch.query(key);
        if q > dist.max_size() as u64 {
            *out.entry(q).or_default() += 1;
        }
    }
}

/// `-Σ i·(n_i/N)·log2(n_i/N)` over sizes `i` with `n_i > 0`, where `N` is
/// the number of flows.
pub fn entropy(distribution: &BTreeMap<u64, u64>) -> Result<f64, AppError> {
    let n: u64 = distribution.values().sum();
    if n == 0 {
        return Err(AppError::EmptyEpoch);
    }
    let n = n as f64;
    let h = distribution
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&i, &c)| {
            let p = c as f64 / n;
            i as f64 * p * p.log2()
        })
        .sum::<f64>();
    Ok(if h == 0.0 { 0.0 } else { -h })
}

/// `ceil(fraction · packets)`, at least 1.
pub fn fraction_threshold(fraction: f64, packets: u64) -> u64 {
    let t = fraction * packets as f64;
    // Absorb representation error so 0.001 · 10000 gives 10, not 11.
    let r = t.round();
    let t = if (t - r).abs() < 1e-9 * r.max(1.0) { r } else { t.ceil() };
    (t as u64).max(1)
}

/// Labelled flows whose current query is at least `threshold`.
pub fn heavy_hitters<H: LayerHasher>(
    table: &LabelTable,
    sketch: &Sketch<H>,
    threshold: u64,
) -> Vec<(FlowKey, u64)> {
    table
        .keys()
        .filter_map(|k| {
            let q = sketch.query(k);
            (q >= threshold).then(|| (k.clone(), q))
        })
        .collect()
}

/// Frozen state of one finished epoch.
#[derive(Debug, Clone)]
pub struct EpochSnapshot<H: LayerHasher> {
    pub sketch: Sketch<H>,
    pub table: LabelTable,
    pub packets: u64,
}

/// Two adjacent epochs measured with the same sketch configuration.
#[derive(Debug, Clone)]
pub struct EpochPair<'a, H: LayerHasher> {
    previous: &'a EpochSnapshot<H>,
    current: &'a EpochSnapshot<H>,
}

impl<'a, H: LayerHasher> EpochPair<'a, H> {
    pub fn new(previous: &'a EpochSnapshot<H>, current: &'a EpochSnapshot<H>) -> Result<Self, AppError> {
        if previous.sketch.config() != current.sketch.config() {
            return Err(AppError::MismatchedEpochs);
        }
        Ok(EpochPair { previous, current })
    }

    pub fn previous(&self) -> &EpochSnapshot<H> {
        self.previous
    }

    pub fn current(&self) -> &EpochSnapshot<H> {
        self.current
    }

    /// `fraction` of the packets of both epochs.
    pub fn change_threshold(&self, fraction: f64) -> f64 {
        fraction * (self.previous.packets + self.current.packets) as f64
    }
}

/// Flows labelled in either epoch whose queries differ by at least
/// `threshold`, in first-labelled order.
pub fn heavy_changers<H: LayerHasher>(pair: &EpochPair<'_, H>, threshold: f64) -> Vec<FlowKey> {
    let mut seen = HashSet::new();
    pair.previous
        .table
        .keys()
        .chain(pair.current.table.keys())
        .filter(|k| seen.insert(*k))
        .filter(|k| {
            let a = pair.previous.sketch.query(k) as f64;
            let b = pair.current.sketch.query(k) as f64;
            (a - b).abs() >= threshold
        })
        .cloned()
        .collect()
}
