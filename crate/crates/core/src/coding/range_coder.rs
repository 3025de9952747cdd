//! 32-bit range coder with byte-wise carry propagation.
//!
//! Frequencies are quantized to a fixed total of `2^16`. The first output
//! byte of this construction is always zero and is not emitted; the final
//! flush writes only as many bytes as needed and the decoder reads zeros
//! past the end of its input.

use crate::error::{DecodeError, Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequency table over symbols `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Quantizes nonnegative weights to frequencies summing to [`PROB_TOTAL`],
    /// every symbol keeping at least 1. Leftover units go to the largest
    /// fractional remainders (ties to the lower symbol).
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n == 0 || n > (PROB_TOTAL / 2) as usize {
            return Err(Error::invalid(format!("frequency table needs 1..={} symbols, got {n}", PROB_TOTAL / 2)));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("frequency weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        let spare = (PROB_TOTAL as usize - n) as f64;
        let ideal: Vec<f64> = if sum > 0.0 {
            weights.iter().map(|w| w / sum * spare).collect()
        } else {
            vec![spare / n as f64; n]
        };
        let mut freq: Vec<u32> = ideal.iter().map(|v| 1 + v.floor() as u32).collect();
        let assigned: u32 = freq.iter().sum();
        let mut left = PROB_TOTAL - assigned;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            freq[i] += 1;
            left -= 1;
        }
        Self::from_freqs(&freq)
    }

    /// Exact frequencies; they must be positive and sum to [`PROB_TOTAL`].
    pub fn from_freqs(freq: &[u32]) -> Result<Self> {
        if freq.is_empty() || freq.contains(&0) {
            return Err(Error::invalid("every symbol needs a positive frequency"));
        }
        let mut cum = Vec::with_capacity(freq.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freq {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != PROB_TOTAL as u64 {
            return Err(Error::invalid(format!("frequencies sum to {acc}, expected {PROB_TOTAL}")));
        }
        Ok(FreqTable { cum })
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn start(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn prob(&self, s: usize) -> f64 {
        self.freq(s) as f64 / PROB_TOTAL as f64
    }

    /// Symbol whose interval contains `v < PROB_TOTAL`.
    fn find(&self, v: u32) -> usize {
        self.cum.partition_point(|&c| c <= v) - 1
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        if self.first {
            self.first = false;
            debug_assert_eq!(b, 0);
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, table: &FreqTable, symbol: usize) {
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * table.start(symbol) as u64;
        self.range = r * table.freq(symbol);
        self.normalize();
    }

    /// Writes `bits <= 16` raw bits of `value` at uniform probability.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < (1 << bits));
        if bits == 0 {
            return;
        }
        let r = self.range >> bits;
        self.low += r as u64 * value as u64;
        self.range = r;
        self.normalize();
    }

    /// Order-0 Exp-Golomb code of `v` through [`encode_bits`](Self::encode_bits).
    pub fn encode_exp_golomb(&mut self, v: u32) {
        let x = v as u64 + 1;
        let n = 63 - x.leading_zeros();
        // one bit per call so the range sequence matches the decoder
        for _ in 0..n {
            self.encode_bits(0, 1);
        }
        self.encode_bits(1, 1);
        let mut rem = n;
        while rem > 0 {
            let k = rem.min(16);
            rem -= k;
            self.encode_bits(((x >> rem) & ((1 << k) - 1)) as u32, k);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        // choose the point in [low, low + range) with the most trailing zeros
        let hi = self.low + self.range as u64;
        for k in (0..=32u32).rev() {
            let mask = (1u64 << k) - 1;
            let v = (self.low + mask) & !mask;
            if v < hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        // the decoder reads exactly as many bytes as were emitted, so at most
        // four trailing zeros can be implied without tripping `overran`
        for _ in 0..4 {
            if self.out.last() != Some(&0) {
                break;
            }
            self.out.pop();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            buf,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    /// True once the decoder has consumed more than 4 bytes past the input.
    pub fn overran(&self) -> bool {
        self.pos > self.buf.len() + 4
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<usize, DecodeError> {
        let r = self.range >> PROB_BITS;
        let v = self.code / r;
        if v >= PROB_TOTAL {
            return Err(DecodeError::Malformed("range coder value outside the table".into()));
        }
        let s = table.find(v);
        self.code -= r * table.start(s);
        self.range = r * table.freq(s);
        self.normalize();
        Ok(s)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32, DecodeError> {
        if bits == 0 {
            return Ok(0);
        }
        let r = self.range >> bits;
        let v = self.code / r;
        if v >= 1 << bits {
            return Err(DecodeError::Malformed("range coder bypass value out of range".into()));
        }
        self.code -= r * v;
        self.range = r;
        self.normalize();
        Ok(v)
    }

    pub fn decode_exp_golomb(&mut self) -> Result<u32, DecodeError> {
        let mut n = 0u32;
        while self.decode_bits(1)? == 0 {
            n += 1;
            if n > 32 {
                return Err(DecodeError::Malformed("exp-golomb prefix too long".into()));
            }
        }
        let mut x: u64 = 1;
        let mut rem = n;
        while rem > 0 {
            let k = rem.min(16);
            rem -= k;
            x = (x << k) | self.decode_bits(k)? as u64;
        }
        u32::try_from(x - 1).map_err(|_| DecodeError::Malformed("exp-golomb value overflows".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_quantize_to_exact_total_with_floor_one() {
        let t = FreqTable::from_weights(&[1e-30, 0.0, 1.0, 5.0]).unwrap();
        let sum: u32 = (0..4).map(|s| t.freq(s)).sum();
        assert_eq!(sum, PROB_TOTAL);
        assert!((0..4).all(|s| t.freq(s) >= 1));
        assert_eq!(t.freq(1), 1);
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(RangeEncoder::new().finish().is_empty());
    }

    #[test]
    fn skewed_source_compresses() {
        let t = FreqTable::from_weights(&[0.99, 0.01]).unwrap();
        let mut e = RangeEncoder::new();
        for _ in 0..1024 {
            e.encode(&t, 0);
        }
        let bytes = e.finish();
        assert!(bytes.len() <= 4, "{}", bytes.len());
        let mut d = RangeDecoder::new(&bytes);
        assert!((0..1024).all(|_| d.decode(&t).unwrap() == 0));
        assert!(!d.overran());
    }

    #[test]
    fn long_zero_tail_is_not_an_overrun() {
        // a run of the first symbol emits literal zero bytes after real content
        let t = FreqTable::from_weights(&[0.5, 0.5]).unwrap();
        let mut e = RangeEncoder::new();
        e.encode_bits(0xbeef, 16);
        for _ in 0..200 {
            e.encode(&t, 0);
        }
        let bytes = e.finish();
        let mut d = RangeDecoder::new(&bytes);
        assert_eq!(d.decode_bits(16).unwrap(), 0xbeef);
        assert!((0..200).all(|_| d.decode(&t).unwrap() == 0));
        assert!(!d.overran());
        let mut cut = RangeDecoder::new(&bytes[..bytes.len() - 1]);
        cut.decode_bits(16).unwrap();
        for _ in 0..200 {
            let _ = cut.decode(&t);
        }
        assert!(cut.overran());
    }

    proptest! {
        #[test]
        fn round_trip_mixed(
            weights in proptest::collection::vec(0.0f64..10.0, 1..50),
            picks in proptest::collection::vec((any::<u16>(), any::<u32>(), 0u32..17), 0..300),
        ) {
            let t = FreqTable::from_weights(&weights).unwrap();
            let mut e = RangeEncoder::new();
            for &(s, v, bits) in &picks {
                e.encode(&t, s as usize % t.len());
                let mask = if bits == 0 { 0 } else { (1u32 << bits) - 1 };
                e.encode_bits(v & mask, bits);
                e.encode_exp_golomb(v);
            }
            let bytes = e.finish();
            let mut d = RangeDecoder::new(&bytes);
            for &(s, v, bits) in &picks {
                prop_assert_eq!(d.decode(&t).unwrap(), s as usize % t.len());
                let mask = if bits == 0 { 0 } else { (1u32 << bits) - 1 };
                prop_assert_eq!(d.decode_bits(bits).unwrap(), v & mask);
                prop_assert_eq!(d.decode_exp_golomb().unwrap(), v);
            }
            prop_assert!(!d.overran());
        }
    }
}
