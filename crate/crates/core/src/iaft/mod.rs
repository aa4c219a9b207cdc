//! Instance-adaptive fine-tuning of the four prediction heads.
//!
//! The frozen backbone and trunks run once per instance; their outputs (the
//! head inputs) are cached together with the target symbols. Fine-tuning
//! then only touches the heads. The tuned heads travel as quantized deltas
//! against the pretrained checkpoint in the weight segment.

use serde::{Deserialize, Serialize};

use crate::coder::{read_varint, write_varint, ExpGolombCoder, RangeDecoder, RangeEncoder};
use crate::geometry::VoxelPyramid;
use crate::tensor::{adam_step, dot, softmax, AdamConfig, AdamState, DenseLayer, Mat, Tensor};
use crate::ucm::{split_code, Head, LevelModel, UcmParams};
use crate::{Error, Result};

pub use crate::codec::rate_split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IaftConfig {
    pub iterations: usize,
    pub lr: f32,
    pub lambda_l1: f32,
    /// Quantization step of the transmitted deltas.
    pub step: f32,
    /// Penalize `|tuned - pretrained|`; `false` penalizes `|tuned|`.
    pub l1_on_delta: bool,
    pub cache_cap_bytes: usize,
}

impl Default for IaftConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 5e-3,
            lambda_l1: 1e-4,
            step: 1.0 / 128.0,
            l1_on_delta: true,
            cache_cap_bytes: 1 << 30,
        }
    }
}

impl IaftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::ConfigError(format!("quantization step must be positive, got {}", self.step)));
        }
        if !(self.lambda_l1.is_finite() && self.lambda_l1 >= 0.0) {
            return Err(Error::ConfigError(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::ConfigError(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Head inputs and target symbols of one head, stacked over levels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub inputs: Mat,
    pub targets: Vec<u8>,
}

impl HeadCache {
    fn empty(cols: usize) -> Self {
        Self {
            inputs: Mat::zeros(0, cols),
            targets: Vec::new(),
        }
    }

    fn push(&mut self, rows: &Mat, targets: &[u8]) {
        self.inputs.data.extend_from_slice(&rows.data);
        self.inputs.rows += rows.rows;
        self.targets.extend_from_slice(targets);
    }
}

/// Frozen-backbone features for every head, indexed by [`Head::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneCache {
    pub heads: [HeadCache; 4],
}

impl BackboneCache {
    pub fn rows(&self) -> usize {
        self.heads.iter().map(|h| h.targets.len()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.heads.iter().map(|h| h.inputs.data.len() * 4 + h.targets.len()).sum()
    }
}

/// Runs the frozen part of the model over levels `1..levels` of `pyr` and
/// caches every head's inputs.
pub fn cache_backbone(pyr: &VoxelPyramid, params: &UcmParams, levels: usize, cap_bytes: usize) -> Result<BackboneCache> {
    let c = params.cfg.hidden_width();
    let mut cache = BackboneCache {
        heads: std::array::from_fn(|_| HeadCache::empty(c)),
    };
    let row_bytes = 4 * c + 1;
    let cg = params.cfg.variant.channel_groups;
    for l in 1..levels.min(pyr.levels.len()) {
        let level = &pyr.levels[l];
        let needed = cache.bytes() + 2 * level.len() * row_bytes;
        if needed > cap_bytes {
            return Err(Error::CacheTooLarge { needed, cap: cap_bytes });
        }
        let model = LevelModel::new(params, &pyr.levels[l - 1], &level.coords)?;
        let part = model.partition().clone();
        let codes1: Vec<u8> = part.g1.iter().map(|&i| level.codes[i]).collect();
        let codes2: Vec<u8> = part.g2.iter().map(|&i| level.codes[i]).collect();
        let ctx1 = model.g1_context();
        let ctx2 = model.g2_context(&codes1)?;
        for (ctx, codes, low, high) in [
            (&ctx1, &codes1, Head::G1Low, Head::G1High),
            (&ctx2, &codes2, Head::G2Low, Head::G2High),
        ] {
            if codes.is_empty() {
                continue;
            }
            if !cg {
                cache.heads[low.index()].push(&model.head_inputs(low, &ctx.rows)?, codes);
                continue;
            }
            let lows: Vec<u8> = codes.iter().map(|&o| split_code(o).0).collect();
            let highs: Vec<u8> = codes.iter().map(|&o| split_code(o).1).collect();
            cache.heads[low.index()].push(&model.head_inputs(low, &ctx.rows)?, &lows);
            let x = model.stage_input(high, ctx, Some(&lows))?;
            cache.heads[high.index()].push(&model.head_inputs(high, &x)?, &highs);
        }
    }
    Ok(cache)
}

/// Quantized head deltas: per head, weights then biases in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedHeads {
    pub step: f32,
    pub q: [Vec<i32>; 4],
}

fn head_len(l: &DenseLayer) -> usize {
    l.w.len() + l.b.len()
}

impl TunedHeads {
    pub fn zero(params: &UcmParams, step: f32) -> Self {
        Self {
            step,
            q: Head::ALL.map(|h| vec![0; head_len(params.head(h))]),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.q.iter().flatten().all(|&v| v == 0)
    }

    pub fn nonzero(&self) -> usize {
        self.q.iter().flatten().filter(|&&v| v != 0).count()
    }

    /// `pretrained + q * step` for every head; everything else untouched.
    pub fn apply(&self, pretrained: &UcmParams) -> Result<UcmParams> {
        let mut p = pretrained.clone();
        for h in Head::ALL {
            let layer = p.head_mut(h);
            let q = &self.q[h.index()];
            if q.len() != head_len(layer) {
                return Err(Error::ShapeError(format!(
                    "{}: {} deltas for {} parameters",
                    h.name(),
                    q.len(),
                    head_len(layer)
                )));
            }
            for (v, &d) in layer.w.data.iter_mut().chain(layer.b.data.iter_mut()).zip(q) {
                *v += d as f32 * self.step;
            }
        }
        Ok(p)
    }
}

/// Summed NLL (nats) of the cached targets under `layer`, with weight and
/// bias gradients of `scale * NLL` accumulated into `gw`, `gb`.
fn head_loss_grad(layer: &DenseLayer, cache: &HeadCache, scale: f32, gw: &mut [f32], gb: &mut [f32]) -> f64 {
    let (out, inp) = (layer.output_dim(), layer.input_dim());
    let mut logits = vec![0f32; out];
    let mut p = vec![0f32; out];
    let mut loss = 0f64;
    for r in 0..cache.inputs.rows {
        let x = cache.inputs.row(r);
        layer.forward_row(x, &mut logits);
        softmax(&logits, &mut p);
        let t = usize::from(cache.targets[r]);
        loss -= f64::from(p[t].max(1e-30).ln());
        p[t] -= 1.0;
        for o in 0..out {
            let g = p[o] * scale;
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            for (w, &xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
    loss
}

/// Mean NLL in bits per cached symbol under `params`' heads.
pub fn cache_bits_per_symbol(cache: &BackboneCache, params: &UcmParams) -> f64 {
    let mut bits = 0.0;
    let mut logits = Vec::new();
    let mut p = Vec::new();
    for h in Head::ALL {
        let layer = params.head(h);
        let hc = &cache.heads[h.index()];
        logits.resize(layer.output_dim(), 0.0);
        p.resize(layer.output_dim(), 0.0);
        for r in 0..hc.inputs.rows {
            layer.forward_row(hc.inputs.row(r), &mut logits);
            softmax(&logits, &mut p);
            bits -= f64::from(p[usize::from(hc.targets[r])].max(1e-30)).log2();
        }
    }
    bits / cache.rows().max(1) as f64
}

/// Adam on the heads only. Loss: mean NLL over all cached symbols plus
/// `lambda_l1 * mean |delta|` (or `mean |w|` with `l1_on_delta = false`).
pub fn finetune(cache: &BackboneCache, params: &UcmParams, cfg: &IaftConfig) -> Result<TunedHeads> {
    cfg.validate()?;
    let n = cache.rows();
    if cfg.iterations == 0 || n == 0 {
        return Ok(TunedHeads::zero(params, cfg.step));
    }
    let pre: Vec<DenseLayer> = Head::ALL.iter().map(|&h| params.head(h).clone()).collect();
    let mut tuned = pre.clone();
    let total_params: usize = pre.iter().map(head_len).sum();
    let l1 = cfg.lambda_l1 / total_params as f32;
    let scale = 1.0 / n as f32;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    for it in 0..cfg.iterations {
        let mut grads: Vec<DenseLayer> = pre.iter().map(|l| DenseLayer::zeros(l.input_dim(), l.output_dim())).collect();
        let mut loss = 0.0;
        for (hi, layer) in tuned.iter().enumerate() {
            let g = &mut grads[hi];
            loss += head_loss_grad(layer, &cache.heads[hi], scale, &mut g.w.data, &mut g.b.data);
        }
        loss /= n as f64;
        for ((t, p), g) in tuned.iter().zip(&pre).zip(grads.iter_mut()) {
            for (tensor, (pt, gt)) in [(&t.w, (&p.w, &mut g.w)), (&t.b, (&p.b, &mut g.b))] {
                for ((&tv, &pv), gv) in tensor.data.iter().zip(&pt.data).zip(gt.data.iter_mut()) {
                    let d = if cfg.l1_on_delta { tv - pv } else { tv };
                    loss += f64::from(cfg.lambda_l1) * f64::from(d.abs()) / total_params as f64;
                    if d != 0.0 {
                        *gv += l1 * d.signum();
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: it,
                loss: loss as f32,
            });
        }
        let mut ps: Vec<&mut Tensor> = tuned.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect();
        let gs: Vec<&Tensor> = grads.iter().flat_map(|l| [&l.w, &l.b]).collect();
        adam_step(&mut ps, &gs, &mut state, &adam);
    }
    let mut q: [Vec<i32>; 4] = Default::default();
    for (hi, (t, p)) in tuned.iter().zip(&pre).enumerate() {
        let vals = t.w.data.iter().chain(&t.b.data).zip(p.w.data.iter().chain(&p.b.data));
        q[hi] = vals
            .map(|(&tv, &pv)| {
                let r = ((tv - pv) / cfg.step).round();
                if !r.is_finite() {
                    return Err(Error::TrainingDiverged {
                        step: cfg.iterations,
                        loss: f32::NAN,
                    });
                }
                Ok(r.clamp(-(i32::MAX as f32), i32::MAX as f32) as i32)
            })
            .collect::<Result<_>>()?;
    }
    Ok(TunedHeads { step: cfg.step, q })
}

/// `[step f32 LE]` then per head `[count varint][stream length varint][stream]`.
pub fn encode_weights(heads: &TunedHeads) -> Vec<u8> {
    let mut out = heads.step.to_le_bytes().to_vec();
    for q in &heads.q {
        let mut enc = RangeEncoder::new();
        let mut eg = ExpGolombCoder::default();
        for &v in q {
            eg.encode(&mut enc, v);
        }
        let bytes = enc.finish();
        write_varint(&mut out, q.len() as u64);
        write_varint(&mut out, bytes.len() as u64);
        out.extend_from_slice(&bytes);
    }
    out
}

/// Parses a weight segment and applies it to `pretrained`.
pub fn decode_weights(bytes: &[u8], pretrained: &UcmParams) -> Result<(TunedHeads, UcmParams)> {
    let corrupt = |why: String| Error::decode("weight segment", why);
    if bytes.len() < 4 {
        return Err(corrupt("shorter than the step field".into()));
    }
    let step = f32::from_le_bytes(bytes[..4].try_into().unwrap());
    if !(step.is_finite() && step > 0.0) {
        return Err(corrupt(format!("invalid quantization step {step}")));
    }
    let mut pos = 4;
    let mut q: [Vec<i32>; 4] = Default::default();
    for h in Head::ALL {
        let expected = head_len(pretrained.head(h));
        let count = read_varint(bytes, &mut pos).map_err(|e| corrupt(e.to_string()))? as usize;
        if count != expected {
            return Err(corrupt(format!("{}: {count} deltas, model has {expected}", h.name())));
        }
        let len = read_varint(bytes, &mut pos).map_err(|e| corrupt(e.to_string()))? as usize;
        let end = pos
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("stream overruns segment".into()))?;
        let mut dec = RangeDecoder::new(&bytes[pos..end]);
        let mut eg = ExpGolombCoder::default();
        q[h.index()] = (0..count).map(|_| eg.decode(&mut dec)).collect::<Result<_>>()?;
        dec.finish().map_err(|_| corrupt(format!("{}: stream length mismatch", h.name())))?;
        pos = end;
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let heads = TunedHeads { step, q };
    let params = heads.apply(pretrained)?;
    Ok((heads, params))
}

/// Row-wise dot of cached inputs with a head, for tests and diagnostics.
pub fn cached_logits(cache: &BackboneCache, params: &UcmParams, head: Head) -> Mat {
    let layer = params.head(head);
    let hc = &cache.heads[head.index()];
    let (out, inp) = (layer.output_dim(), layer.input_dim());
    let mut m = Mat::zeros(hc.inputs.rows, out);
    for r in 0..hc.inputs.rows {
        for o in 0..out {
            m.row_mut(r)[o] = dot(&layer.w.data[o * inp..(o + 1) * inp], hc.inputs.row(r)) + layer.b.data[o];
        }
    }
    m
}
