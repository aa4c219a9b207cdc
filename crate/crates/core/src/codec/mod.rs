//! End-to-end encoder and decoder.
//!
//! Coding order: the root code with a fixed prior, then for every coded
//! level the four model stages (G1 low, G1 high, G2 low, G2 high), all in a
//! single range-coded stream. Lossy streams stop coding at `s_loss` and
//! send only the voxel count of every finer scale; the decoder fills those
//! scales in by top-k selection.

mod container;
mod lossy;

use std::borrow::Cow;
use std::sync::OnceLock;

pub use container::{rate_split, BitstreamContainer, RateSplit, MAGIC, VERSION};
pub use lossy::{joint_pmf, renormalize_nonzero, topk_from_root, topk_reconstruct};

use container::Fnv32;

use crate::coder::{quantize_pmf, QuantizedPmf, RangeDecoder, RangeEncoder};
use crate::geometry::{build_pyramid, o2v, v2o, Coord, OccupancyLevel, PointCloud, VoxelPyramid};
use crate::iaft::{cache_backbone, decode_weights, encode_weights, finetune, IaftConfig};
use crate::ucm::{split_code, LevelPredictor, NibblePmf, UcmParams};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecConfig {
    /// First scale reconstructed by top-k; `None` (or the cloud depth) is
    /// lossless.
    pub s_loss: Option<u8>,
    /// Instance-adaptive fine-tuning; `None` or zero iterations skips it.
    pub iaft: Option<IaftConfig>,
    /// Expected checkpoint id; encoding fails if `params` differ.
    pub model_id: Option<u64>,
}

impl CodecConfig {
    pub fn lossless() -> Self {
        Self::default()
    }

    pub fn lossy(s_loss: u8) -> Self {
        Self {
            s_loss: Some(s_loss),
            ..Self::default()
        }
    }
}

/// What the encoder did besides producing the container.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeReport {
    /// `sum -log2 q(symbol)` over the emitted geometry stream.
    pub ideal_geometry_bits: f64,
    /// Independent range-coder streams in the geometry segment.
    pub geometry_streams: usize,
    pub symbols: usize,
    pub iaft: Option<IaftOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IaftOutcome {
    pub untuned_geometry_bytes: usize,
    pub tuned_geometry_bytes: usize,
    pub weight_bytes: usize,
    pub nonzero_deltas: usize,
    /// The tuned stream was smaller and got emitted.
    pub accepted: bool,
}

/// Result of decoding: the cloud plus every entropy-coded level.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub cloud: PointCloud,
    /// `levels[l]` for `l < s_loss`, identical to the encoder's pyramid.
    pub levels: Vec<OccupancyLevel>,
}

struct Geometry {
    bytes: Vec<u8>,
    ideal_bits: f64,
    symbols: usize,
    fnv: Fnv32,
}

/// Root prior: every nonzero code equally likely, split into nibbles.
fn root_tables() -> &'static (QuantizedPmf, QuantizedPmf, QuantizedPmf) {
    static T: OnceLock<(QuantizedPmf, QuantizedPmf, QuantizedPmf)> = OnceLock::new();
    T.get_or_init(|| {
        let mut low = [16.0 / 255.0; 16];
        low[0] = 15.0 / 255.0;
        let mut high_after_zero = [1.0 / 15.0; 16];
        high_after_zero[0] = 0.0;
        (
            quantize_pmf(&low).unwrap(),
            quantize_pmf(&high_after_zero).unwrap(),
            QuantizedPmf::uniform(),
        )
    })
}

fn root_high_table(low: u8) -> &'static QuantizedPmf {
    let t = root_tables();
    if low == 0 {
        &t.1
    } else {
        &t.2
    }
}

fn encode_stage(enc: &mut RangeEncoder, fnv: &mut Fnv32, pmfs: &[NibblePmf], symbols: &[u8]) -> Result<()> {
    for (p, &s) in pmfs.iter().zip(symbols) {
        enc.encode_symbol(usize::from(s), &quantize_pmf(p)?);
        fnv.push(s);
    }
    Ok(())
}

fn encode_geometry(pyr: &VoxelPyramid, params: &UcmParams, s_loss: usize) -> Result<Geometry> {
    let mut enc = RangeEncoder::new();
    let mut fnv = Fnv32::default();
    if s_loss > 0 {
        let (lo, hi) = split_code(pyr.levels[0].codes[0]);
        enc.encode_symbol(usize::from(lo), &root_tables().0);
        enc.encode_symbol(usize::from(hi), root_high_table(lo));
        fnv.push(lo);
        fnv.push(hi);
    }
    for l in 1..s_loss {
        let level = &pyr.levels[l];
        let mut pred = LevelPredictor::new(params, &pyr.levels[l - 1], &level.coords)?;
        let part = pred.model().partition().clone();
        let nibbles = |idx: &[usize]| -> (Vec<u8>, Vec<u8>) { idx.iter().map(|&i| split_code(level.codes[i])).unzip() };
        let (l1, h1) = nibbles(&part.g1);
        let (l2, h2) = nibbles(&part.g2);
        encode_stage(&mut enc, &mut fnv, &pred.g1_low()?, &l1)?;
        encode_stage(&mut enc, &mut fnv, &pred.g1_high(&l1)?, &h1)?;
        encode_stage(&mut enc, &mut fnv, &pred.g2_low(&h1)?, &l2)?;
        encode_stage(&mut enc, &mut fnv, &pred.g2_high(&l2)?, &h2)?;
    }
    let (ideal_bits, symbols) = (enc.ideal_bits(), enc.symbols());
    Ok(Geometry {
        bytes: enc.finish(),
        ideal_bits,
        symbols,
        fnv,
    })
}

/// The check value covers the coded symbols followed by every container
/// byte before the check itself.
fn seal(c: &mut BitstreamContainer, mut fnv: Fnv32) {
    let bytes = c.to_bytes();
    for &b in &bytes[..bytes.len() - 4] {
        fnv.push(b);
    }
    c.check = fnv.value();
}

pub fn encode(pc: &PointCloud, params: &UcmParams, cfg: &CodecConfig) -> Result<BitstreamContainer> {
    encode_with_report(pc, params, cfg).map(|(c, _)| c)
}

pub fn encode_with_report(pc: &PointCloud, params: &UcmParams, cfg: &CodecConfig) -> Result<(BitstreamContainer, EncodeReport)> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let model_id = params.model_id();
    if let Some(want) = cfg.model_id {
        if want != model_id {
            return Err(Error::ConfigError(format!(
                "checkpoint id {model_id:016x} does not match configured {want:016x}"
            )));
        }
    }
    let depth = pc.depth();
    let s_loss = cfg.s_loss.unwrap_or(depth);
    if s_loss > depth {
        return Err(Error::ConfigError(format!("s_loss {s_loss} exceeds depth {depth}")));
    }
    let pyr = build_pyramid(pc);
    let untuned = encode_geometry(&pyr, params, usize::from(s_loss))?;

    let mut iaft = false;
    let mut fallback = false;
    let mut weights = Vec::new();
    let mut geometry = untuned;
    let mut outcome = None;
    if let Some(icfg) = cfg.iaft.as_ref().filter(|c| c.iterations > 0) {
        icfg.validate()?;
        let cache = cache_backbone(&pyr, params, usize::from(s_loss), icfg.cache_cap_bytes)?;
        let heads = finetune(&cache, params, icfg)?;
        let w = encode_weights(&heads);
        let tuned_params = heads.apply(params)?;
        let tuned = encode_geometry(&pyr, &tuned_params, usize::from(s_loss))?;
        let accepted = w.len() + tuned.bytes.len() < geometry.bytes.len();
        outcome = Some(IaftOutcome {
            untuned_geometry_bytes: geometry.bytes.len(),
            tuned_geometry_bytes: tuned.bytes.len(),
            weight_bytes: w.len(),
            nonzero_deltas: heads.nonzero(),
            accepted,
        });
        iaft = true;
        if accepted {
            weights = w;
            geometry = tuned;
        } else {
            fallback = true;
        }
    }

    let counts = (usize::from(s_loss) + 1..=usize::from(depth))
        .map(|s| if s == usize::from(depth) { pc.len() } else { pyr.levels[s].len() } as u64)
        .collect();
    let mut c = BitstreamContainer {
        depth,
        s_loss,
        iaft,
        fallback,
        model_id,
        point_count: pc.len() as u64,
        counts,
        weights,
        geometry: geometry.bytes,
        check: 0,
    };
    seal(&mut c, geometry.fnv);
    let report = EncodeReport {
        ideal_geometry_bits: geometry.ideal_bits,
        geometry_streams: 1,
        symbols: geometry.symbols,
        iaft: outcome,
    };
    Ok((c, report))
}

struct StageDecoder<'a> {
    dec: RangeDecoder<'a>,
    fnv: Fnv32,
}

impl StageDecoder<'_> {
    fn symbol(&mut self, pmf: &QuantizedPmf, at: &str) -> Result<u8> {
        let s = self.dec.decode_symbol(pmf).map_err(|e| relocate(e, at))? as u8;
        self.fnv.push(s);
        Ok(s)
    }

    fn stage(&mut self, pmfs: Result<Vec<NibblePmf>>, at: &str) -> Result<Vec<u8>> {
        pmfs.map_err(|e| relocate(e, at))?
            .iter()
            .map(|p| self.symbol(&quantize_pmf(p).map_err(|e| relocate(e, at))?, at))
            .collect()
    }
}

fn relocate(e: Error, at: &str) -> Error {
    match e {
        Error::DecodeError { reason, .. } => Error::decode(at, reason),
        other => Error::decode(at, other.to_string()),
    }
}

pub fn decode(c: &BitstreamContainer, params: &UcmParams) -> Result<PointCloud> {
    decode_full(c, params).map(|d| d.cloud)
}

pub fn decode_bytes(bytes: &[u8], params: &UcmParams) -> Result<PointCloud> {
    decode(&BitstreamContainer::parse(bytes)?, params)
}

pub fn decode_full(c: &BitstreamContainer, params: &UcmParams) -> Result<Decoded> {
    let model_id = params.model_id();
    if c.model_id != model_id {
        return Err(Error::ConfigError(format!(
            "stream needs checkpoint {:016x}, loaded checkpoint is {model_id:016x}",
            c.model_id
        )));
    }
    if c.depth > crate::geometry::MAX_DEPTH || c.s_loss > c.depth || c.counts.len() != usize::from(c.depth - c.s_loss) {
        return Err(Error::decode("header", "inconsistent depth, s_loss and counts"));
    }
    let params: Cow<'_, UcmParams> = if c.iaft && !c.fallback {
        Cow::Owned(decode_weights(&c.weights, params)?.1)
    } else {
        Cow::Borrowed(params)
    };
    let limit = c.point_count as usize;
    let s_loss = usize::from(c.s_loss);
    let mut sd = StageDecoder {
        dec: RangeDecoder::new(&c.geometry),
        fnv: Fnv32::default(),
    };
    let mut levels: Vec<OccupancyLevel> = Vec::with_capacity(s_loss);
    if s_loss > 0 {
        let lo = sd.symbol(&root_tables().0, "scale 0 root")?;
        let hi = sd.symbol(root_high_table(lo), "scale 0 root")?;
        let code = crate::ucm::merge_code(lo, hi).map_err(|e| relocate(e, "scale 0 root"))?;
        levels.push(OccupancyLevel {
            scale: 0,
            coords: vec![[0, 0, 0]],
            codes: vec![code],
        });
    }
    for l in 1..s_loss {
        let at = |stage: &str| format!("scale {l} {stage}");
        let parent = &levels[l - 1];
        let total: usize = parent.codes.iter().map(|c| c.count_ones() as usize).sum();
        if total > limit {
            return Err(Error::decode(at("size"), format!("{total} voxels exceed point count {limit}")));
        }
        let coords = parent.children().map_err(|e| relocate(e, &at("size")))?;
        let mut pred = LevelPredictor::new(&params, parent, &coords).map_err(|e| relocate(e, &at("setup")))?;
        let l1 = sd.stage(pred.g1_low(), &at("g1 low"))?;
        let h1 = sd.stage(pred.g1_high(&l1), &at("g1 high"))?;
        let l2 = sd.stage(pred.g2_low(&h1), &at("g2 low"))?;
        let h2 = sd.stage(pred.g2_high(&l2), &at("g2 high"))?;
        let codes = pred.finish(&h2).map_err(|e| relocate(e, &at("g2 high")))?;
        levels.push(OccupancyLevel {
            scale: l as u8,
            coords,
            codes,
        });
    }
    let StageDecoder { dec, mut fnv } = sd;
    dec.finish().map_err(|e| relocate(e, "geometry end"))?;
    let bytes = c.to_bytes();
    for &b in &bytes[..bytes.len() - 4] {
        fnv.push(b);
    }
    if fnv.value() != c.check {
        return Err(Error::decode(
            "end-of-stream check",
            format!("expected {:08x}, got {:08x}", c.check, fnv.value()),
        ));
    }

    let points = if c.s_loss == c.depth {
        let last = levels.last().expect("depth >= 1");
        let pts = last.children().map_err(|e| relocate(e, "leaf level"))?;
        if pts.len() != limit {
            return Err(Error::decode("leaf level", format!("{} points, header says {limit}", pts.len())));
        }
        pts
    } else {
        lossy_tail(&levels, &c.counts, limit, &params)?
    };
    let cloud = PointCloud::from_voxels(points, c.depth).map_err(|e| relocate(e, "output"))?;
    Ok(Decoded { cloud, levels })
}

fn lossy_tail(levels: &[OccupancyLevel], counts: &[u64], limit: usize, params: &UcmParams) -> Result<Vec<Coord>> {
    if *counts.last().expect("lossy has counts") != limit as u64 {
        return Err(Error::decode("lossy counts", "last count differs from point count"));
    }
    let s0 = levels.len();
    let as_k = |i: usize| -> Result<usize> {
        let k = counts[i];
        if k > limit as u64 {
            return Err(Error::decode(
                format!("lossy scale {}", s0 + 1 + i),
                format!("count {k} exceeds point count"),
            ));
        }
        Ok(k as usize)
    };
    let (mut cur, mut coords, first) = match levels.last() {
        Some(l) => (l.clone(), Vec::new(), 0),
        None => {
            let sel = topk_from_root(as_k(0)?).map_err(|e| relocate(e, "lossy scale 1"))?;
            (level_of(&sel, 0)?, sel, 1)
        }
    };
    for i in first..counts.len() {
        let at = format!("lossy scale {}", s0 + 1 + i);
        coords = topk_reconstruct(&cur, as_k(i)?, params).map_err(|e| relocate(e, &at))?;
        if i + 1 < counts.len() {
            cur = level_of(&coords, cur.scale + 1)?;
        }
    }
    Ok(coords)
}

fn level_of(children: &[Coord], scale: u8) -> Result<OccupancyLevel> {
    let (coords, codes) = v2o(children)?;
    Ok(OccupancyLevel { scale, coords, codes })
}

/// Container bits per original point (weights included).
pub fn compute_bpp(c: &BitstreamContainer, points: usize) -> f64 {
    c.to_bytes().len() as f64 * 8.0 / points.max(1) as f64
}

/// Voxels of the top-k scales of a pyramid as the encoder sees them, for
/// comparing against a lossy decode.
pub fn scale_coords(pyr: &VoxelPyramid, scale: usize) -> Result<Vec<Coord>> {
    match scale {
        0 => Ok(vec![[0, 0, 0]]),
        s if s <= pyr.levels.len() => o2v(&pyr.levels[s - 1].coords, &pyr.levels[s - 1].codes),
        s => Err(Error::InvalidInput(format!("scale {s} beyond depth {}", pyr.depth))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iaft::IaftConfig;
    use crate::ucm::UcmConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> UcmParams {
        UcmParams::init(&UcmConfig::with_channels(4), 11)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, depth: u8) -> PointCloud {
        let side = 1u32 << depth;
        let n = rng.random_range(1..400);
        let thin = rng.random_range(1..=side);
        let pts = (0..n)
            .map(|_| [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..thin)])
            .collect();
        PointCloud::from_voxels(pts, depth).unwrap()
    }

    #[test]
    fn single_point_is_small_and_exact() {
        let p = params();
        let pc = PointCloud::from_voxels(vec![[5, 9, 2]], 4).unwrap();
        let c = encode(&pc, &p, &CodecConfig::lossless()).unwrap();
        let bytes = c.to_bytes();
        assert!(bytes.len() < 100, "{} bytes", bytes.len());
        assert_eq!(decode_bytes(&bytes, &p).unwrap(), pc);
        assert_eq!(c.rate_split().weight_bits, 0);
    }

    #[test]
    fn lossless_roundtrips_and_rate_bound() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let pc = random_cloud(&mut rng, 4 + (i % 5) as u8);
            let (c, rep) = encode_with_report(&pc, &p, &CodecConfig::lossless()).unwrap();
            let d = decode_full(&BitstreamContainer::parse(&c.to_bytes()).unwrap(), &p).unwrap();
            assert_eq!(d.cloud, pc, "cloud {i}");
            assert_eq!(d.levels, build_pyramid(&pc).levels);
            let bits = c.geometry.len() as f64 * 8.0;
            assert!(bits <= rep.ideal_geometry_bits + 64.0 * rep.geometry_streams as f64);
            let bpp = compute_bpp(&c, pc.len());
            assert!((bpp * pc.len() as f64 - c.to_bytes().len() as f64 * 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tampering_never_corrupts_silently() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pc = random_cloud(&mut rng, 6);
        for cfg in [CodecConfig::lossless(), CodecConfig::lossy(3)] {
            let bytes = encode(&pc, &p, &cfg).unwrap().to_bytes();
            let reference = decode_bytes(&bytes, &p).unwrap();
            for i in 0..bytes.len() {
                for flip in [1u8, 0x80] {
                    let mut b = bytes.clone();
                    b[i] ^= flip;
                    if let Ok(out) = decode_bytes(&b, &p) {
                        assert_eq!(out, reference, "byte {i} flip {flip:#x} decoded silently");
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_checkpoint_is_rejected_up_front() {
        let p = params();
        let other = UcmParams::init(&UcmConfig::with_channels(4), 12);
        let pc = PointCloud::from_voxels(vec![[1, 2, 3], [4, 5, 6]], 4).unwrap();
        let c = encode(&pc, &p, &CodecConfig::lossless()).unwrap();
        assert!(matches!(decode(&c, &other), Err(Error::ConfigError(_))));
        let cfg = CodecConfig {
            model_id: Some(other.model_id()),
            ..CodecConfig::default()
        };
        assert!(matches!(encode(&pc, &p, &cfg), Err(Error::ConfigError(_))));
    }

    #[test]
    fn zero_iteration_iaft_is_the_plain_stream() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc = random_cloud(&mut rng, 6);
        let plain = encode(&pc, &p, &CodecConfig::lossless()).unwrap();
        let cfg = CodecConfig {
            iaft: Some(IaftConfig {
                iterations: 0,
                ..IaftConfig::default()
            }),
            ..CodecConfig::default()
        };
        let zero = encode(&pc, &p, &cfg).unwrap();
        assert_eq!(plain.to_bytes(), zero.to_bytes());
        assert!(zero.weights.is_empty());
    }

    #[test]
    fn iaft_stream_roundtrips_and_never_costs_more() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pc = random_cloud(&mut rng, 6);
        let plain = encode(&pc, &p, &CodecConfig::lossless()).unwrap();
        let cfg = CodecConfig {
            iaft: Some(IaftConfig {
                iterations: 30,
                lr: 2e-2,
                ..IaftConfig::default()
            }),
            ..CodecConfig::default()
        };
        let (c, rep) = encode_with_report(&pc, &p, &cfg).unwrap();
        assert!(c.iaft);
        let o = rep.iaft.unwrap();
        assert_eq!(o.accepted, !c.fallback);
        assert!(c.weights.len() + c.geometry.len() <= plain.geometry.len());
        assert_eq!(decode_bytes(&c.to_bytes(), &p).unwrap(), pc);
    }

    #[test]
    fn lossy_cardinality_and_prefix() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let pc = random_cloud(&mut rng, 6);
            let lossless = decode_full(&encode(&pc, &p, &CodecConfig::lossless()).unwrap(), &p).unwrap();
            let pyr = build_pyramid(&pc);
            for s in 0..6u8 {
                let c = encode(&pc, &p, &CodecConfig::lossy(s)).unwrap();
                assert!(c.is_lossy());
                assert_eq!(c.counts.len(), usize::from(6 - s));
                for (i, &k) in c.counts.iter().enumerate() {
                    assert_eq!(k as usize, scale_coords(&pyr, usize::from(s) + 1 + i).unwrap().len());
                }
                let d = decode_full(&c, &p).unwrap();
                assert_eq!(d.cloud.len(), pc.len());
                assert_eq!(d.levels[..], lossless.levels[..usize::from(s)]);
            }
        }
    }

    #[test]
    fn s_loss_above_depth_is_rejected() {
        let pc = PointCloud::from_voxels(vec![[1, 1, 1]], 3).unwrap();
        assert!(matches!(encode(&pc, &params(), &CodecConfig::lossy(4)), Err(Error::ConfigError(_))));
    }

    #[test]
    fn bpp_arithmetic() {
        let c = BitstreamContainer {
            depth: 4,
            s_loss: 4,
            iaft: false,
            fallback: false,
            model_id: 0,
            point_count: 100,
            counts: vec![],
            weights: vec![],
            geometry: vec![0; 100 - 23],
            check: 0,
        };
        assert_eq!(c.to_bytes().len(), 100);
        assert_eq!(compute_bpp(&c, 100), 8.0);
    }
}
