use crate::coder::{read_varint, write_varint};
use crate::geometry::MAX_DEPTH;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCGC";
pub const VERSION: u8 = 1;

const FLAG_LOSSY: u8 = 1;
const FLAG_IAFT: u8 = 2;
const FLAG_FALLBACK: u8 = 4;

/// Parsed form of an encoded file.
///
/// Layout: magic, version u8, depth u8, flags u8 (lossy, iaft, fallback),
/// s_loss u8, model id u64 LE, point count varint, one count varint per
/// top-k scale, weight segment (length varint + bytes), geometry segment
/// (length varint + bytes), check value u32 LE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub depth: u8,
    /// Codes of scales `0..s_loss` are entropy coded; finer scales are
    /// reconstructed by top-k. `s_loss == depth` means lossless.
    pub s_loss: u8,
    pub iaft: bool,
    /// IAFT ran but did not pay off; the pretrained heads were used.
    pub fallback: bool,
    pub model_id: u64,
    pub point_count: u64,
    /// Voxel counts of scales `s_loss + 1 ..= depth`.
    pub counts: Vec<u64>,
    pub weights: Vec<u8>,
    pub geometry: Vec<u8>,
    pub check: u32,
}

/// Per-segment sizes in bits; the three add up to the file size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateSplit {
    pub weight_bits: u64,
    pub geometry_bits: u64,
    pub header_bits: u64,
}

impl RateSplit {
    pub fn total_bits(&self) -> u64 {
        self.weight_bits + self.geometry_bits + self.header_bits
    }
}

impl BitstreamContainer {
    pub fn is_lossy(&self) -> bool {
        self.s_loss < self.depth
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.weights.len() + self.geometry.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.depth);
        let mut flags = 0;
        if self.is_lossy() {
            flags |= FLAG_LOSSY;
        }
        if self.iaft {
            flags |= FLAG_IAFT;
        }
        if self.fallback {
            flags |= FLAG_FALLBACK;
        }
        out.push(flags);
        out.push(self.s_loss);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        write_varint(&mut out, self.point_count);
        for &k in &self.counts {
            write_varint(&mut out, k);
        }
        write_varint(&mut out, self.weights.len() as u64);
        out.extend_from_slice(&self.weights);
        write_varint(&mut out, self.geometry.len() as u64);
        out.extend_from_slice(&self.geometry);
        out.extend_from_slice(&self.check.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ParseError(m.to_string());
        if bytes.len() < 20 {
            return Err(bad("file too short for a header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::ParseError(format!("unsupported version {}", bytes[4])));
        }
        let depth = bytes[5];
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::ParseError(format!("depth {depth} out of range")));
        }
        let flags = bytes[6];
        if flags & !(FLAG_LOSSY | FLAG_IAFT | FLAG_FALLBACK) != 0 {
            return Err(bad("unknown flag bits"));
        }
        let s_loss = bytes[7];
        if s_loss > depth {
            return Err(bad("s_loss exceeds depth"));
        }
        if (flags & FLAG_LOSSY != 0) != (s_loss < depth) {
            return Err(bad("lossy flag disagrees with s_loss"));
        }
        let iaft = flags & FLAG_IAFT != 0;
        let fallback = flags & FLAG_FALLBACK != 0;
        if fallback && !iaft {
            return Err(bad("fallback flag without iaft flag"));
        }
        let model_id = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut pos = 16;
        let point_count = read_varint(bytes, &mut pos)?;
        if point_count == 0 {
            return Err(bad("zero point count"));
        }
        let counts = (s_loss..depth).map(|_| read_varint(bytes, &mut pos)).collect::<Result<Vec<_>>>()?;
        let segment = |pos: &mut usize| -> Result<Vec<u8>> {
            let len = read_varint(bytes, pos)?;
            let end = (*pos as u64)
                .checked_add(len)
                .filter(|&e| e <= bytes.len() as u64)
                .ok_or_else(|| bad("segment overruns file"))? as usize;
            let seg = bytes[*pos..end].to_vec();
            *pos = end;
            Ok(seg)
        };
        let weights = segment(&mut pos)?;
        let geometry = segment(&mut pos)?;
        if bytes.len() != pos + 4 {
            return Err(bad("check value missing or trailing bytes"));
        }
        if (iaft && !fallback) == weights.is_empty() {
            return Err(bad("weight segment disagrees with iaft flag"));
        }
        let check = u32::from_le_bytes(bytes[pos..].try_into().unwrap());
        Ok(Self {
            depth,
            s_loss,
            iaft,
            fallback,
            model_id,
            point_count,
            counts,
            weights,
            geometry,
            check,
        })
    }

    pub fn rate_split(&self) -> RateSplit {
        let total = self.to_bytes().len() as u64 * 8;
        let weight_bits = self.weights.len() as u64 * 8;
        let geometry_bits = self.geometry.len() as u64 * 8;
        RateSplit {
            weight_bits,
            geometry_bits,
            header_bits: total - weight_bits - geometry_bits,
        }
    }
}

/// Segment sizes of an encoded file.
pub fn rate_split(bytes: &[u8]) -> Result<RateSplit> {
    Ok(BitstreamContainer::parse(bytes)?.rate_split())
}

/// 32-bit FNV-1a, used as the end-of-stream check over coded symbols.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Fnv32(u32);

impl Default for Fnv32 {
    fn default() -> Self {
        Self(0x811c_9dc5)
    }
}

impl Fnv32 {
    pub fn push(&mut self, b: u8) {
        self.0 ^= u32::from(b);
        self.0 = self.0.wrapping_mul(0x0100_0193);
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BitstreamContainer {
        BitstreamContainer {
            depth: 8,
            s_loss: 5,
            iaft: true,
            fallback: false,
            model_id: 0xdead_beef_0123_4567,
            point_count: 1234,
            counts: vec![100, 400, 1234],
            weights: vec![1, 2, 3],
            geometry: vec![9; 300],
            check: 0xabcd_ef01,
        }
    }

    #[test]
    fn roundtrip_and_accounting() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(BitstreamContainer::parse(&bytes).unwrap(), c);
        let r = rate_split(&bytes).unwrap();
        assert_eq!(r.total_bits(), bytes.len() as u64 * 8);
        assert_eq!((r.weight_bits, r.geometry_bits), (24, 2400));
        let lossless = BitstreamContainer {
            s_loss: 8,
            counts: vec![],
            iaft: false,
            weights: vec![],
            ..c
        };
        let bytes = lossless.to_bytes();
        assert_eq!(BitstreamContainer::parse(&bytes).unwrap(), lossless);
        assert_eq!(rate_split(&bytes).unwrap().weight_bits, 0);
    }

    #[test]
    fn malformed_headers() {
        let bytes = sample().to_bytes();
        for cut in [0, 10, 19, bytes.len() - 1] {
            assert!(BitstreamContainer::parse(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(BitstreamContainer::parse(&b).is_err());
        let mut b = bytes.clone();
        b[6] = 0x80;
        assert!(BitstreamContainer::parse(&b).is_err());
        let mut b = bytes.clone();
        b[7] = 9;
        assert!(BitstreamContainer::parse(&b).is_err());
        let mut b = bytes;
        b.push(0);
        assert!(matches!(BitstreamContainer::parse(&b), Err(Error::ParseError(_))));
    }

    #[test]
    fn fnv_reference_values() {
        let mut h = Fnv32::default();
        for &b in b"a" {
            h.push(b);
        }
        assert_eq!(h.value(), 0xe40c_292c);
    }
}
