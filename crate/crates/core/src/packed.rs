//! Fixed-width counters packed into `u64` words.
//!
//! Counter `i` occupies bits `[i*b, (i+1)*b)` of the word stream, low bits
//! first. When `b` divides 64 a counter never crosses a word boundary; other
//! widths are supported and straddle two words where needed.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedCounters {
    words: Vec<u64>,
    bits: u32,
    len: usize,
    mask: u64,
}

impl PackedCounters {
    /// `bits` must be in `1..=64`.
    pub fn new(len: usize, bits: u32) -> Self {
        assert!((1..=64).contains(&bits), "counter width {bits} out of range");
        let total_bits = len as u128 * bits as u128;
        let n_words = total_bits.div_ceil(64) as usize;
        PackedCounters {
            words: vec![0; n_words],
            bits,
            len,
            mask: mask(bits),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Largest storable value, `2^bits - 1`.
    pub fn max_value(&self) -> u64 {
        self.mask
    }

    /// Bytes needed for `len * bits` bits, rounded up to whole bytes.
    pub fn packed_bytes(&self) -> usize {
        (self.len as u128 * self.bits as u128).div_ceil(8) as usize
    }

    /// Bytes actually allocated (whole words).
    pub fn allocated_bytes(&self) -> usize {
        self.words.len() * 8
    }

    #[inline]
    pub fn get(&self, i: usize) -> u64 {
        debug_assert!(i < self.len);
        let off = i * self.bits as usize;
        let w = off >> 6;
        let s = (off & 63) as u32;
        let mut v = self.words[w] >> s;
        if s + self.bits > 64 {
            v |= self.words[w + 1] << (64 - s);
        }
        v & self.mask
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: u64) {
        debug_assert!(i < self.len);
        debug_assert!(v <= self.mask, "value {v} exceeds {} bits", self.bits);
        let v = v & self.mask;
        let off = i * self.bits as usize;
        let w = off >> 6;
        let s = (off & 63) as u32;
        self.words[w] = (self.words[w] & !(self.mask << s)) | (v << s);
        if s + self.bits > 64 {
            let hi = s + self.bits - 64;
            let hi_mask = mask(hi);
            self.words[w + 1] = (self.words[w + 1] & !hi_mask) | (v >> (64 - s));
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    pub fn count_zeros(&self) -> usize {
        self.iter().filter(|&v| v == 0).count()
    }
}

#[inline]
fn mask(bits: u32) -> u64 {
    if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}
