//! Range coder with a 64-bit interval and byte-wise renormalization.
//!
//! The encoder keeps a 64-bit window of `low` and propagates carries into
//! the bytes already written. After renormalization `range >= 2^56`, so a
//! 16-bit frequency total leaves at least 2^40 resolution per symbol.
//! Flushing writes one byte, which makes a finished stream exactly seven
//! bytes shorter than what the decoder has read once it has consumed every
//! symbol; the decoder uses that as its final-state check.

use super::pmf::{QuantizedPmf, PMF_BITS};
use crate::{Error, Result};

const TOP: u64 = 1 << 56;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
    ideal_bits: f64,
    symbols: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
            ideal_bits: 0.0,
            symbols: 0,
        }
    }

    fn carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
        unreachable!("carry past the first output byte");
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^total_bits`.
    pub fn encode_freq(&mut self, cum: u32, freq: u32, total_bits: u32) {
        debug_assert!(freq > 0 && u64::from(cum) + u64::from(freq) <= 1u64 << total_bits);
        let r = self.range >> total_bits;
        let (low, overflow) = self.low.overflowing_add(r * u64::from(cum));
        self.low = low;
        if overflow {
            self.carry();
        }
        self.range = r * u64::from(freq);
        while self.range < TOP {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        self.ideal_bits += f64::from(total_bits) - f64::from(freq).log2();
        self.symbols += 1;
    }

    pub fn encode_symbol(&mut self, s: usize, pmf: &QuantizedPmf) {
        self.encode_freq(pmf.cum(s), pmf.freq(s), PMF_BITS);
    }

    /// Sum of `-log2 q(s)` over everything coded so far.
    pub fn ideal_bits(&self) -> f64 {
        self.ideal_bits
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn finish(mut self) -> Vec<u8> {
        // value with as many trailing zero bits as fit in [low, low + range)
        let lo = u128::from(self.low);
        let hi = lo + u128::from(self.range) - 1;
        let mask = (1u128 << 56) - 1;
        let mut v = (lo + mask) & !mask;
        debug_assert!(v <= hi);
        if v >> 64 != 0 {
            self.carry();
            v &= u128::from(u64::MAX);
        }
        self.out.push((v >> 56) as u8);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    pending: Option<(u32, u32)>,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
            pending: None,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | u64::from(d.next_byte());
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Scaled target in `[0, 2^total_bits)`; follow with [`Self::consume`].
    pub fn decode_target(&mut self, total_bits: u32) -> Result<u32> {
        let r = self.range >> total_bits;
        let v = self.code / r;
        if v >> total_bits != 0 {
            return Err(Error::decode("range coder", "target outside the frequency table"));
        }
        self.pending = Some((total_bits, r as u32));
        Ok(v as u32)
    }

    pub fn consume(&mut self, cum: u32, freq: u32, total_bits: u32) {
        debug_assert!(self.pending.is_some_and(|(b, _)| b == total_bits));
        self.pending = None;
        let r = self.range >> total_bits;
        self.code -= r * u64::from(cum);
        self.range = r * u64::from(freq);
        while self.range < TOP {
            self.code = (self.code << 8) | u64::from(self.next_byte());
            self.range <<= 8;
        }
    }

    pub fn decode_symbol(&mut self, pmf: &QuantizedPmf) -> Result<usize> {
        let target = self.decode_target(PMF_BITS)?;
        let s = pmf.symbol_for(target);
        self.consume(pmf.cum(s), pmf.freq(s), PMF_BITS);
        Ok(s)
    }

    /// Checks that the stream ended exactly where the encoder flushed it.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() + 7 {
            return Err(Error::decode(
                "range coder",
                format!(
                    "stream length mismatch: consumed {} of {} bytes",
                    self.pos.saturating_sub(7),
                    self.data.len()
                ),
            ));
        }
        Ok(())
    }
}
