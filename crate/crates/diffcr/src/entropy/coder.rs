//! Carry-aware range coder with 32-bit state and byte renormalization.
//!
//! The encoder keeps `low` in a 33-bit register so a carry out of the top
//! byte can be propagated into the already-buffered run of 0xFF bytes. The
//! decoder mirrors renormalization byte for byte, so the symbol sequence is
//! recovered exactly; reads past the end of the buffer return zeros and set
//! a flag instead of panicking, which the container layer turns into a
//! corruption error.

use super::TOTAL_SHIFT;

const TOP: u32 = 1 << 24;

/// Frozen cumulative frequency table. `cum` has one entry per symbol plus a
/// trailing 2^16; every frequency is at least 1.
#[derive(Clone, Debug)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantize probabilities to 16-bit frequencies with a floor of 1,
    /// using largest-value correction so the total is exactly 2^16.
    /// Deterministic, so encoder and decoder processes build identical
    /// tables from identical model outputs.
    pub fn from_probs(probs: &[f64]) -> Self {
        let k = probs.len();
        assert!(k >= 1, "empty alphabet");
        assert!(k <= 1 << TOTAL_SHIFT, "alphabet too large for 16-bit table");
        let target: u64 = 1 << TOTAL_SHIFT;
        let mut freqs: Vec<u64> = probs
            .iter()
            .map(|&p| ((p.max(0.0) * target as f64).floor() as u64).max(1))
            .collect();
        let mut sum: u64 = freqs.iter().sum();
        if sum < target {
            let argmax = Self::argmax(&freqs);
            freqs[argmax] += target - sum;
        } else {
            while sum > target {
                let argmax = Self::argmax(&freqs);
                let cut = (sum - target).min(freqs[argmax] - 1);
                assert!(cut > 0, "cannot fit alphabet into table");
                freqs[argmax] -= cut;
                sum -= cut;
            }
        }
        let mut cum = Vec::with_capacity(k + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freqs {
            acc += f as u32;
            cum.push(acc);
        }
        debug_assert_eq!(acc as u64, target);
        CdfTable { cum }
    }

    fn argmax(freqs: &[u64]) -> usize {
        let mut best = 0;
        for (i, &f) in freqs.iter().enumerate() {
            if f > freqs[best] {
                best = i;
            }
        }
        best
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn span(&self, sym: usize) -> (u32, u32) {
        (self.cum[sym], self.cum[sym + 1] - self.cum[sym])
    }

    /// Greatest symbol whose cumulative start is <= `val`.
    fn find(&self, val: u32) -> usize {
        self.cum.partition_point(|&c| c <= val) - 1
    }

    /// Frequency of `sym` out of 2^16, as a probability.
    pub fn prob(&self, sym: usize) -> f64 {
        let (_, f) = self.span(sym);
        f as f64 / (1u64 << TOTAL_SHIFT) as f64
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, table: &CdfTable, sym: usize) {
        let (cum, freq) = table.span(sym);
        debug_assert!(freq > 0);
        let r = self.range >> TOTAL_SHIFT;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
    overran: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, buf, pos: 0, overran: false };
        // the first encoder byte is the flushed initial cache, always zero
        let _ = d.next_byte();
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            self.pos += 1;
            b
        } else {
            self.overran = true;
            0
        }
    }

    pub fn decode(&mut self, table: &CdfTable) -> usize {
        let r = self.range >> TOTAL_SHIFT;
        let val = (self.code / r).min((1 << TOTAL_SHIFT) - 1);
        let sym = table.find(val);
        let (cum, freq) = table.span(sym);
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        sym
    }

    /// True if decoding consumed more bytes than the buffer held, which on
    /// a well-formed stream cannot happen and signals corruption.
    pub fn overran(&self) -> bool {
        self.overran
    }
}
