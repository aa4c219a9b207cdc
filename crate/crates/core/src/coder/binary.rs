use super::range::{RangeDecoder, RangeEncoder};
use crate::{Error, Result};

const BITS: u32 = 16;
const ONE: u32 = 1 << BITS;
const SHIFT: u32 = 5;
const MIN_P: u32 = 32;

/// Adaptive probability that the next bin is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryContext {
    p0: u32,
}

impl Default for BinaryContext {
    fn default() -> Self {
        Self { p0: ONE / 2 }
    }
}

impl BinaryContext {
    fn update(&mut self, bit: bool) {
        if bit {
            self.p0 -= self.p0 >> SHIFT;
        } else {
            self.p0 += (ONE - self.p0) >> SHIFT;
        }
        self.p0 = self.p0.clamp(MIN_P, ONE - MIN_P);
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, bit: bool) {
        if bit {
            enc.encode_freq(self.p0, ONE - self.p0, BITS);
        } else {
            enc.encode_freq(0, self.p0, BITS);
        }
        self.update(bit);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> Result<bool> {
        let t = dec.decode_target(BITS)?;
        let bit = t >= self.p0;
        if bit {
            dec.consume(self.p0, ONE - self.p0, BITS);
        } else {
            dec.consume(0, self.p0, BITS);
        }
        self.update(bit);
        Ok(bit)
    }
}

const MAX_PREFIX: usize = 31;

/// Signed integers as order-0 Exp-Golomb bins with one adaptive context per
/// bin position; the sign bin follows a nonzero magnitude.
#[derive(Clone, Debug)]
pub struct ExpGolombCoder {
    prefix: [BinaryContext; MAX_PREFIX + 1],
    suffix: [BinaryContext; MAX_PREFIX],
    sign: BinaryContext,
}

impl Default for ExpGolombCoder {
    fn default() -> Self {
        Self {
            prefix: [BinaryContext::default(); MAX_PREFIX + 1],
            suffix: [BinaryContext::default(); MAX_PREFIX],
            sign: BinaryContext::default(),
        }
    }
}

impl ExpGolombCoder {
    pub fn encode(&mut self, enc: &mut RangeEncoder, value: i32) {
        let mag = value.unsigned_abs();
        let n = u64::from(mag) + 1;
        let len = 63 - n.leading_zeros() as usize;
        for i in 0..len {
            self.prefix[i].encode(enc, true);
        }
        self.prefix[len].encode(enc, false);
        for i in (0..len).rev() {
            self.suffix[i].encode(enc, (n >> i) & 1 == 1);
        }
        if mag != 0 {
            self.sign.encode(enc, value < 0);
        }
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let mut len = 0;
        while self.prefix[len].decode(dec)? {
            len += 1;
            if len > MAX_PREFIX {
                return Err(Error::decode("exp-golomb", "prefix too long"));
            }
        }
        let mut n: u64 = 1;
        for i in (0..len).rev() {
            n = (n << 1) | u64::from(self.suffix[i].decode(dec)?);
        }
        let mag = n - 1;
        if mag > i32::MAX as u64 {
            return Err(Error::decode("exp-golomb", "magnitude overflow"));
        }
        let mag = mag as i32;
        if mag != 0 && self.sign.decode(dec)? {
            Ok(-mag)
        } else {
            Ok(mag)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integers_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut vals: Vec<i32> = (0..5000).map(|_| rng.random_range(-127..=127)).collect();
        vals.extend([0, 1, -1, i32::MAX, -i32::MAX, 1 << 20]);
        let mut enc = RangeEncoder::new();
        let mut eg = ExpGolombCoder::default();
        vals.iter().for_each(|&v| eg.encode(&mut enc, v));
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        let mut eg = ExpGolombCoder::default();
        for &v in &vals {
            assert_eq!(eg.decode(&mut dec).unwrap(), v);
        }
        dec.finish().unwrap();
    }

    #[test]
    fn zeros_are_cheap() {
        let mut enc = RangeEncoder::new();
        let mut eg = ExpGolombCoder::default();
        for _ in 0..2000 {
            eg.encode(&mut enc, 0);
        }
        assert!(enc.finish().len() < 20);
    }
}
