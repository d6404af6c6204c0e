//! Layered counter store and its update rules.
//!
//! A sketch has `d` layers. In the split layouts the top layer holds
//! `top_bits`-wide counters and every layer below halves the counter width
//! while multiplying the counter count by the expansion factor `r`, so
//! `w_1 = r·w_2 = … = r^(d-1)·w_d`. Flat layouts (plain Count-Min) use
//! `top_bits` counters of equal width in every layer.
//!
//! A counter that reaches `T_j = 2^b_j - 1` is saturated: it is never
//! incremented again and it is left out of the decode minimum, except in the
//! top layer whose value is always considered.
//!
//! Layers are zero-based in this API; layer `0` is the lowest (widest) one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::hashing::{FlowKey, LayerHasher, SeededHasher};
use crate::packed::PackedCounters;

pub const DEFAULT_TOP_BITS: u32 = 32;

/// Sketch variants: layout plus update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    /// Count-Min: equal-width 32-bit rows, increment every row.
    FlatCM,
    /// Count-Min with conservative update.
    FlatCU,
    /// Split counters, increment every layer (cross-layer Count-Min).
    SplitCM,
    /// Split counters with minimum update.
    SplitMU,
    /// Split counters with conservative update across layers.
    SplitCU,
    /// Split counters, count only in the lowest unsaturated layer.
    Cascade,
}

/// How a packet touches the counters of its flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    CountMin,
    Conservative,
    Minimum,
    Cascade,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::FlatCM,
        Scheme::FlatCU,
        Scheme::SplitCM,
        Scheme::SplitMU,
        Scheme::SplitCU,
        Scheme::Cascade,
    ];

    pub fn is_flat(self) -> bool {
        matches!(self, Scheme::FlatCM | Scheme::FlatCU)
    }

    pub fn rule(self) -> UpdateRule {
        match self {
            Scheme::FlatCM | Scheme::SplitCM => UpdateRule::CountMin,
            Scheme::FlatCU | Scheme::SplitCU => UpdateRule::Conservative,
            Scheme::SplitMU => UpdateRule::Minimum,
            Scheme::Cascade => UpdateRule::Cascade,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::FlatCM => "FlatCM",
            Scheme::FlatCU => "FlatCU",
            Scheme::SplitCM => "SplitCM",
            Scheme::SplitMU => "SplitMU",
            Scheme::SplitCU => "SplitCU",
            Scheme::Cascade => "Cascade",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown scheme {0:?} (expected one of FlatCM, FlatCU, SplitCM, SplitMU, SplitCU, Cascade)")]
pub struct UnknownScheme(pub String);

impl FromStr for Scheme {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownScheme(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SketchError {
    #[error("a sketch needs at least one layer")]
    NoLayers,
    #[error("expansion factor must be at least 2, got {0}")]
    BadExpansion(u64),
    #[error("top counter width must be between 2 and 64 bits, got {0}")]
    BadTopBits(u32),
    #[error("halving {top_bits}-bit counters over {layers} layers gives layer {layer} a width below 2 bits or a fractional width")]
    BadHalving {
        top_bits: u32,
        layers: usize,
        layer: usize,
    },
    #[error("{memory_bytes} bytes cannot hold one column of {column_bits} bits")]
    ZeroWidth { memory_bytes: u64, column_bits: u128 },
    #[error("expected {expected} hash seeds, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("every counter of the key is saturated (top layer at {top})")]
    AllSaturated { top: u64 },
    #[error("value {value} exceeds the limit {limit} of layer {layer}")]
    ValueOutOfRange { layer: usize, value: u64, limit: u64 },
    #[error("counter {index} out of range for layer {layer} of width {width}")]
    IndexOutOfRange {
        layer: usize,
        index: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub scheme: Scheme,
    pub memory_bytes: u64,
    pub layers: usize,
    /// Expansion factor `r`; ignored by flat schemes.
    pub expansion: u64,
    pub top_bits: u32,
    /// One seed per layer for the default hasher.
    pub hash_seeds: Vec<u64>,
}

impl SketchConfig {
    /// Default shape (`top_bits = 32`) with layer seeds expanded from `seed`.
    pub fn new(scheme: Scheme, memory_bytes: u64, layers: usize, expansion: u64, seed: u64) -> Self {
        SketchConfig {
            scheme,
            memory_bytes,
            layers,
            expansion,
            top_bits: DEFAULT_TOP_BITS,
            hash_seeds: SeededHasher::from_master(seed, layers).seeds().to_vec(),
        }
    }

    pub fn with_top_bits(mut self, top_bits: u32) -> Self {
        self.top_bits = top_bits;
        self
    }

    /// Counter width of every layer, lowest first.
    pub fn layer_bits(&self) -> Result<Vec<u32>, SketchError> {
        let d = self.layers;
        if d == 0 {
            return Err(SketchError::NoLayers);
        }
        if !(2..=64).contains(&self.top_bits) {
            return Err(SketchError::BadTopBits(self.top_bits));
        }
        if self.scheme.is_flat() {
            return Ok(vec![self.top_bits; d]);
        }
        (0..d)
            .map(|j| {
                let shift = (d - 1 - j) as u32;
                let bad = SketchError::BadHalving {
                    top_bits: self.top_bits,
                    layers: d,
                    layer: j,
                };
                if shift >= 32 {
                    return Err(bad);
                }
                let div = 1u32 << shift;
                if !self.top_bits.is_multiple_of(div) || self.top_bits / div < 2 {
                    return Err(bad);
                }
                Ok(self.top_bits / div)
            })
            .collect()
    }

    /// Derives per-layer widths and counter sizes from the memory budget.
    pub fn layout(&self) -> Result<Layout, SketchError> {
        let bits = self.layer_bits()?;
        let d = self.layers;
        if !self.scheme.is_flat() && self.expansion < 2 {
            return Err(SketchError::BadExpansion(self.expansion));
        }
        let budget = self.memory_bytes as u128 * 8;
        // Multipliers r^(d-1-j) relative to the top width.
        let ratios: Vec<u128> = if self.scheme.is_flat() {
            vec![1; d]
        } else {
            let r = self.expansion as u128;
            let mut out = Vec::with_capacity(d);
            let mut acc: Option<u128> = Some(1);
            for _ in 0..d {
                out.push(acc);
                acc = acc.and_then(|a| a.checked_mul(r));
            }
            out.reverse();
            match out.into_iter().collect::<Option<Vec<_>>>() {
                Some(v) => v,
                None => {
                    return Err(SketchError::ZeroWidth {
                        memory_bytes: self.memory_bytes,
                        column_bits: u128::MAX,
                    })
                }
            }
        };
        let column_bits = ratios
            .iter()
            .zip(&bits)
            .try_fold(0u128, |acc, (&ratio, &b)| {
                ratio.checked_mul(b as u128).and_then(|x| acc.checked_add(x))
            })
            .unwrap_or(u128::MAX);
        let top_width = budget / column_bits;
        if top_width == 0 {
            return Err(SketchError::ZeroWidth {
                memory_bytes: self.memory_bytes,
                column_bits,
            });
        }
        let widths = ratios
            .iter()
            .map(|&ratio| usize::try_from(ratio * top_width).expect("layer width fits in usize"))
            .collect();
        Ok(Layout { widths, bits })
    }
}

/// Per-layer counter counts `w_j` and counter widths `b_j`, lowest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub widths: Vec<usize>,
    pub bits: Vec<u32>,
}

impl Layout {
    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    /// `T_j = 2^b_j - 1`.
    pub fn limits(&self) -> Vec<u64> {
        self.bits
            .iter()
            .map(|&b| if b == 64 { u64::MAX } else { (1u64 << b) - 1 })
            .collect()
    }

    pub fn total_bits(&self) -> u128 {
        self.widths
            .iter()
            .zip(&self.bits)
            .map(|(&w, &b)| w as u128 * b as u128)
            .sum()
    }

    /// Counter count of each layer divided by the row width of `baseline`
    /// (typically a flat three-row Count-Min at the same memory).
    pub fn normalized_counts(&self, baseline: &Layout) -> Vec<f64> {
        let base = baseline.widths[0] as f64;
        self.widths.iter().map(|&w| w as f64 / base).collect()
    }
}

/// Outcome of one packet update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncodeResult {
    /// Decode of the flow right after the update.
    pub estimate: u64,
    /// Counters incremented by this packet.
    pub writes: u32,
    /// Bit `l` is set when layer `l` was skipped because it was saturated.
    pub saturated_layers: u32,
}

type Indices = SmallVec<[usize; 8]>;

#[derive(Debug, Clone)]
pub struct Sketch<H = SeededHasher> {
    config: SketchConfig,
    layout: Layout,
    limits: Vec<u64>,
    layers: Vec<PackedCounters>,
    hasher: H,
}

impl Sketch<SeededHasher> {
    /// Builds a zeroed sketch using the config's layer seeds.
    pub fn new(config: SketchConfig) -> Result<Self, SketchError> {
        if config.hash_seeds.len() != config.layers {
            return Err(SketchError::SeedCount {
                expected: config.layers,
                got: config.hash_seeds.len(),
            });
        }
        let hasher = SeededHasher::new(config.hash_seeds.clone());
        Sketch::with_hasher(config, hasher)
    }
}

impl<H: LayerHasher> Sketch<H> {
    pub fn with_hasher(config: SketchConfig, hasher: H) -> Result<Self, SketchError> {
        let layout = config.layout()?;
        let limits = layout.limits();
        let layers = layout
            .widths
            .iter()
            .zip(&layout.bits)
            .map(|(&w, &b)| PackedCounters::new(w, b))
            .collect();
        Ok(Sketch {
            config,
            layout,
            limits,
            layers,
            hasher,
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn limits(&self) -> &[u64] {
        &self.limits
    }

    pub fn layer(&self, l: usize) -> &PackedCounters {
        &self.layers[l]
    }

    pub fn hasher(&self) -> &H {
        &self.hasher
    }

    /// Sum of the packed byte sizes of all layers.
    pub fn storage_bytes(&self) -> usize {
        self.layers.iter().map(PackedCounters::packed_bytes).sum()
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(PackedCounters::clear);
    }

    pub fn counter(&self, layer: usize, index: usize) -> u64 {
        self.layers[layer].get(index)
    }

    pub fn set_counter(&mut self, layer: usize, index: usize, value: u64) -> Result<(), SketchError> {
        let limit = self.limits[layer];
        if value > limit {
            return Err(SketchError::ValueOutOfRange { layer, value, limit });
        }
        let width = self.layers[layer].len();
        if index >= width {
            return Err(SketchError::IndexOutOfRange { layer, index, width });
        }
        self.layers[layer].set(index, value);
        Ok(())
    }

    /// Counter position of `key` in every layer.
    pub fn indices(&self, key: &FlowKey) -> SmallVec<[usize; 8]> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, arr)| self.hasher.index(key, l, arr.len()))
            .collect()
    }

    /// Current counter values of `key`, lowest layer first.
    pub fn counters_of(&self, key: &FlowKey) -> Vec<u64> {
        let idx = self.indices(key);
        idx.iter()
            .enumerate()
            .map(|(l, &i)| self.layers[l].get(i))
            .collect()
    }

    /// Updates with the scheme's rule.
    pub fn encode(&mut self, key: &FlowKey) -> Result<EncodeResult, SketchError> {
        match self.config.scheme.rule() {
            UpdateRule::CountMin => self.encode_cm(key),
            UpdateRule::Conservative => self.encode_cu(key),
            UpdateRule::Minimum => self.encode_mu(key),
            UpdateRule::Cascade => self.encode_cascade(key),
        }
    }

    /// Minimum update: walk the layers from the lowest up and increment a
    /// counter only if it is unsaturated and strictly below the running
    /// minimum, which then takes the counter's new value.
    pub fn encode_mu(&mut self, key: &FlowKey) -> Result<EncodeResult, SketchError> {
        let idx = self.indices(key);
        let top = self.layers.len() - 1;
        let mut val_min = u64::MAX;
        let mut res = EncodeResult::default();
        let mut estimate = u64::MAX;
        for (l, &i) in idx.iter().enumerate() {
            let limit = self.limits[l];
            let mut c = self.layers[l].get(i);
            if c == limit {
                res.saturated_layers |= 1 << l;
            } else if c < val_min {
                c += 1;
                self.layers[l].set(i, c);
                val_min = c;
                res.writes += 1;
            }
            if c != limit || l == top {
                estimate = estimate.min(c);
            }
        }
        self.finish(res, estimate, &idx)
    }

    /// Cross-layer Count-Min: increment every unsaturated counter.
    pub fn encode_cm(&mut self, key: &FlowKey) -> Result<EncodeResult, SketchError> {
        let idx = self.indices(key);
        let top = self.layers.len() - 1;
        let mut res = EncodeResult::default();
        let mut estimate = u64::MAX;
        for (l, &i) in idx.iter().enumerate() {
            let limit = self.limits[l];
            let mut c = self.layers[l].get(i);
            if c == limit {
                res.saturated_layers |= 1 << l;
            } else {
                c += 1;
                self.layers[l].set(i, c);
                res.writes += 1;
            }
            if c != limit || l == top {
                estimate = estimate.min(c);
            }
        }
        self.finish(res, estimate, &idx)
    }

    /// Conservative update: raise every unsaturated counter that equals the
    /// minimum over the key's unsaturated counters.
    pub fn encode_cu(&mut self, key: &FlowKey) -> Result<EncodeResult, SketchError> {
        let idx = self.indices(key);
        let top = self.layers.len() - 1;
        let mut res = EncodeResult::default();
        let mut values: SmallVec<[u64; 8]> = SmallVec::with_capacity(idx.len());
        let mut m = u64::MAX;
        for (l, &i) in idx.iter().enumerate() {
            let c = self.layers[l].get(i);
            if c == self.limits[l] {
                res.saturated_layers |= 1 << l;
            } else {
                m = m.min(c);
            }
            values.push(c);
        }
        let mut estimate = u64::MAX;
        for (l, &i) in idx.iter().enumerate() {
            let limit = self.limits[l];
            let mut c = values[l];
            if c != limit && c == m {
                c += 1;
                self.layers[l].set(i, c);
                res.writes += 1;
            }
            if c != limit || l == top {
                estimate = estimate.min(c);
            }
        }
        self.finish(res, estimate, &idx)
    }

    /// Single-tree cascade: count in the lowest unsaturated layer only.
    pub fn encode_cascade(&mut self, key: &FlowKey) -> Result<EncodeResult, SketchError> {
        let idx = self.indices(key);
        let mut res = EncodeResult::default();
        for (l, &i) in idx.iter().enumerate() {
            let c = self.layers[l].get(i);
            if c == self.limits[l] {
                res.saturated_layers |= 1 << l;
                continue;
            }
            self.layers[l].set(i, c + 1);
            res.writes = 1;
            break;
        }
        if res.writes == 0 {
            let top = *idx.last().expect("at least one layer");
            return Err(SketchError::AllSaturated {
                top: self.layers[idx.len() - 1].get(top),
            });
        }
        res.estimate = self.decode_cascade(&idx);
        Ok(res)
    }

    fn finish(&self, mut res: EncodeResult, estimate: u64, idx: &Indices) -> Result<EncodeResult, SketchError> {
        let all = if self.layers.len() >= 32 {
            u32::MAX
        } else {
            (1u32 << self.layers.len()) - 1
        };
        if res.saturated_layers == all {
            let top = self.layers.len() - 1;
            return Err(SketchError::AllSaturated {
                top: self.layers[top].get(idx[top]),
            });
        }
        res.estimate = estimate;
        Ok(res)
    }

    /// Point query without mutation.
    pub fn query(&self, key: &FlowKey) -> u64 {
        let idx = self.indices(key);
        match self.config.scheme.rule() {
            UpdateRule::Cascade => self.decode_cascade(&idx),
            _ => self.decode_min(&idx),
        }
    }

    /// Like [`query`](Self::query) but also reports whether the top-layer
    /// counter is saturated (the estimate is then only a lower bound).
    pub fn query_flagged(&self, key: &FlowKey) -> (u64, bool) {
        let idx = self.indices(key);
        let top = self.layers.len() - 1;
        let saturated = self.layers[top].get(idx[top]) == self.limits[top];
        let v = match self.config.scheme.rule() {
            UpdateRule::Cascade => self.decode_cascade(&idx),
            _ => self.decode_min(&idx),
        };
        (v, saturated)
    }

    fn decode_min(&self, idx: &[usize]) -> u64 {
        let top = self.layers.len() - 1;
        idx.iter()
            .enumerate()
            .filter_map(|(l, &i)| {
                let c = self.layers[l].get(i);
                (c != self.limits[l] || l == top).then_some(c)
            })
            .min()
            .unwrap_or(0)
    }

    fn decode_cascade(&self, idx: &[usize]) -> u64 {
        let mut total = 0u64;
        for (l, &i) in idx.iter().enumerate() {
            let c = self.layers[l].get(i);
            if c == self.limits[l] {
                total = total.saturating_add(c);
            } else {
                return total.saturating_add(c);
            }
        }
        total
    }
}
