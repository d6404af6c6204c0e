//! Flow keys and the per-layer index functions.
//!
//! Every sketch layer owns an independent hash function. The default
//! [`SeededHasher`] runs xxh3 with one seed per layer; tests swap in
//! [`IdentityHasher`] or an arbitrary closure through [`FnHasher`] to get
//! hand-computable counter positions.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use xxhash_rust::xxh3::xxh3_64_with_seed;

/// Length of the canonical IPv4 5-tuple encoding.
pub const FIVE_TUPLE_LEN: usize = 13;

/// Opaque flow identifier.
///
/// The canonical form for IPv4 traffic is
/// `src addr ‖ dst addr ‖ src port ‖ dst port ‖ protocol`, big-endian,
/// 4+4+2+2+1 bytes. Any other non-empty byte string is accepted as well.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey(SmallVec<[u8; 16]>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiveTuple {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("flow key must not be empty")]
pub struct EmptyKey;

impl FlowKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmptyKey> {
        if bytes.is_empty() {
            return Err(EmptyKey);
        }
        Ok(FlowKey(SmallVec::from_slice(bytes)))
    }

    /// Eight big-endian bytes of `v`. Handy for synthetic keys where the
    /// integer value itself matters (see [`IdentityHasher`]).
    pub fn from_u64(v: u64) -> Self {
        FlowKey(SmallVec::from_slice(&v.to_be_bytes()))
    }

    pub fn from_five_tuple(t: &FiveTuple) -> Self {
        let mut buf = [0u8; FIVE_TUPLE_LEN];
        buf[0..4].copy_from_slice(&t.src.octets());
        buf[4..8].copy_from_slice(&t.dst.octets());
        buf[8..10].copy_from_slice(&t.src_port.to_be_bytes());
        buf[10..12].copy_from_slice(&t.dst_port.to_be_bytes());
        buf[12] = t.proto;
        FlowKey(SmallVec::from_slice(&buf))
    }

    /// Decodes the canonical 5-tuple layout, if the key has it.
    pub fn five_tuple(&self) -> Option<FiveTuple> {
        let b = self.as_bytes();
        if b.len() != FIVE_TUPLE_LEN {
            return None;
        }
        Some(FiveTuple {
            src: Ipv4Addr::new(b[0], b[1], b[2], b[3]),
            dst: Ipv4Addr::new(b[4], b[5], b[6], b[7]),
            src_port: u16::from_be_bytes([b[8], b[9]]),
            dst_port: u16::from_be_bytes([b[10], b[11]]),
            proto: b[12],
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FlowKey({self})")
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.five_tuple() {
            Some(t) => write!(
                f,
                "{},{},{},{},{}",
                t.src, t.dst, t.src_port, t.dst_port, t.proto
            ),
            None => {
                for b in self.as_bytes() {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
        }
    }
}

/// Maps a key to a counter index in one layer.
///
/// Layers are zero-based here (`0` is the lowest, widest layer).
/// Implementations must be deterministic and return a value in `[0, width)`.
pub trait LayerHasher {
    fn index(&self, key: &FlowKey, layer: usize, width: usize) -> usize;
}

impl<H: LayerHasher + ?Sized> LayerHasher for &H {
    fn index(&self, key: &FlowKey, layer: usize, width: usize) -> usize {
        (**self).index(key, layer, width)
    }
}

/// xxh3 with an independent 64-bit seed per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeededHasher {
    seeds: Vec<u64>,
}

impl SeededHasher {
    pub fn new(seeds: Vec<u64>) -> Self {
        SeededHasher { seeds }
    }

    /// Expands one master seed into `layers` distinct layer seeds.
    pub fn from_master(master: u64, layers: usize) -> Self {
        let mut state = master;
        let seeds = (0..layers).map(|_| splitmix64(&mut state)).collect();
        SeededHasher { seeds }
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    #[inline]
    pub fn hash(&self, key: &FlowKey, layer: usize) -> u64 {
        xxh3_64_with_seed(key.as_bytes(), self.seeds[layer])
    }
}

impl LayerHasher for SeededHasher {
    #[inline]
    fn index(&self, key: &FlowKey, layer: usize, width: usize) -> usize {
        (self.hash(key, layer) % width as u64) as usize
    }
}

/// Reads the key as a big-endian unsigned integer and reduces it modulo the
/// layer width: `h_l(f) = f mod w_l`, identical for every layer.
///
/// Only meant for tests and worked examples. With keys `0..n` built by
/// [`FlowKey::from_u64`] and widths `>= n` it is injective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityHasher;

impl LayerHasher for IdentityHasher {
    fn index(&self, key: &FlowKey, _layer: usize, width: usize) -> usize {
        let w = width as u128;
        key.as_bytes()
            .iter()
            .fold(0u128, |acc, &b| (acc * 256 + b as u128) % w) as usize
    }
}

/// Wraps an arbitrary `(key, layer, width) -> index` closure.
#[derive(Clone, Copy)]
pub struct FnHasher<F>(pub F);

impl<F> LayerHasher for FnHasher<F>
where
    F: Fn(&FlowKey, usize, usize) -> usize,
{
    fn index(&self, key: &FlowKey, layer: usize, width: usize) -> usize {
        (self.0)(key, layer, width) % width
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
