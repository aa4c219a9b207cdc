use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{G2Trace, LevelModel};
use super::params::{Head, UcmConfig, UcmParams};
use super::{predict_level, split_code, GroupContext};
use crate::geometry::{build_pyramid, OccupancyLevel, PointCloud, VoxelPyramid};
use crate::tensor::{adam_step, relu_backward, softmax_cross_entropy, AdamConfig, AdamState, Mat};
use crate::{Error, Result};

/// Loss and backward pass of one prediction stage: `head(relu(trunk(x)))`
/// against `targets`. Returns `(nats, dL/dx)` with gradients scaled by `scale`.
pub(crate) fn stage_backward(
    params: &UcmParams,
    head: Head,
    x: &Mat,
    targets: &[u8],
    scale: f32,
    grad: &mut UcmParams,
) -> Result<(f64, Mat)> {
    let trunk = params.trunk(head);
    let pre = trunk.forward(x)?;
    let t = crate::tensor::relu(&pre);
    let logits = params.head(head).forward(&t)?;
    let (loss, gl) = softmax_cross_entropy(&logits, targets, scale);
    let gt = params.head(head).backward(&t, &gl, grad.head_mut(head));
    let gpre = relu_backward(&pre, &gt);
    let gx = trunk.backward(x, &gpre, grad.trunk_mut(head));
    Ok((loss, gx))
}

/// Forward plus backward of the four coding stages for one group. Returns
/// `(nats, dL/dctx)`.
fn group_backward(
    model: &LevelModel<'_>,
    group: usize,
    ctx: &GroupContext,
    codes: &[u8],
    scale: f32,
    grad: &mut UcmParams,
) -> Result<(f64, Mat)> {
    let p = model.params();
    let (low_head, high_head) = if group == 1 {
        (Head::G1Low, Head::G1High)
    } else {
        (Head::G2Low, Head::G2High)
    };
    if !p.cfg.variant.channel_groups {
        return stage_backward(p, low_head, &ctx.rows, codes, scale, grad);
    }
    let lows: Vec<u8> = codes.iter().map(|&c| split_code(c).0).collect();
    let highs: Vec<u8> = codes.iter().map(|&c| split_code(c).1).collect();
    let (l0, mut gctx) = stage_backward(p, low_head, &ctx.rows, &lows, scale, grad)?;
    let x = model.stage_input(high_head, ctx, Some(&lows))?;
    let (l1, gx) = stage_backward(p, high_head, &x, &highs, scale, grad)?;
    gctx.add_assign(&gx);
    let emb = if group == 1 { &p.nibble_emb_g1 } else { &p.nibble_emb_g2 };
    let gemb = if group == 1 {
        &mut grad.nibble_emb_g1
    } else {
        &mut grad.nibble_emb_g2
    };
    emb.backward(&lows, &gx, gemb);
    Ok((l0 + l1, gctx))
}

fn g2_backward(model: &LevelModel<'_>, trace: &G2Trace, g1_codes: &[u8], gctx: &Mat, grad: &mut UcmParams) -> (Mat, Mat) {
    let p = model.params();
    let Some(nbr) = &trace.nbr else {
        return (gctx.clone(), Mat::zeros(g1_codes.len(), gctx.cols));
    };
    let mut g_fg2 = gctx.clone();
    let g_pre = relu_backward(&trace.fuse_pre, gctx);
    let g_cat = p.fuse.backward(&trace.cat, &g_pre, &mut grad.fuse);
    let (g_direct, g_agg) = g_cat.split_cols(gctx.cols);
    g_fg2.add_assign(&g_direct);
    let g_fhat = nbr.conv_backward(&trace.fhat, &p.agg, &g_agg, &mut grad.agg);
    p.prior_code_emb.backward(g1_codes, &g_fhat, &mut grad.prior_code_emb);
    (g_fg2, g_fhat)
}

/// NLL (nats) of one level's true codes and its gradient, scaled by `scale`,
/// accumulated into `grad`. `parents` is the coarser scale and `level` the
/// one being predicted.
pub fn level_loss_and_grad(
    params: &UcmParams,
    parents: &OccupancyLevel,
    level: &OccupancyLevel,
    scale: f32,
    grad: &mut UcmParams,
) -> Result<f64> {
    let model = LevelModel::new(params, parents, &level.coords)?;
    let part = model.partition().clone();
    let bb = &model.backbone;
    let c = params.cfg.channels;
    let codes1: Vec<u8> = part.g1.iter().map(|&i| level.codes[i]).collect();
    let codes2: Vec<u8> = part.g2.iter().map(|&i| level.codes[i]).collect();

    let mut g_f = Mat::zeros(level.len(), c);
    let ctx1 = model.g1_context();
    let (loss1, g_ctx1) = group_backward(&model, 1, &ctx1, &codes1, scale, grad)?;
    g_f.scatter_add(&part.g1, &g_ctx1);

    let mut loss2 = 0.0;
    if !part.g2.is_empty() {
        let trace = model.g2_trace(&codes1)?;
        let ctx2 = GroupContext { rows: trace.ctx.clone() };
        let (l, g_ctx2) = group_backward(&model, 2, &ctx2, &codes2, scale, grad)?;
        loss2 = l;
        let (g_fg2, g_fhat) = g2_backward(&model, &trace, &codes1, &g_ctx2, grad);
        g_f.scatter_add(&part.g2, &g_fg2);
        if trace.nbr.is_some() {
            g_f.scatter_add(&part.g1, &g_fhat);
        }
    }

    // f = u + relu(a3)
    let g_a3 = relu_backward(&bb.a3, &g_f);
    let mut g_u = g_f;
    g_u.add_assign(&bb.nbr_child.conv_backward(&bb.u, &params.target, &g_a3, &mut grad.target));
    // u = z[parent] + offset_emb[bit]
    params.offset_emb.backward(&bb.child_bits, &g_u, &mut grad.offset_emb);
    let mut g_z = Mat::zeros(parents.len(), c);
    g_z.scatter_add(&bb.parent_index, &g_u);
    // z = z1 + relu(a2)
    let g_a2 = relu_backward(&bb.a2, &g_z);
    let mut g_z1 = g_z;
    g_z1.add_assign(&bb.nbr_parent.conv_backward(&bb.z1, &params.prior_b, &g_a2, &mut grad.prior_b));
    // z1 = z0 + relu(a1)
    let g_a1 = relu_backward(&bb.a1, &g_z1);
    let mut g_z0 = g_z1;
    g_z0.add_assign(&bb.nbr_parent.conv_backward(&bb.z0, &params.prior_a, &g_a1, &mut grad.prior_a));
    params.code_emb.backward(&bb.parent_codes, &g_z0, &mut grad.code_emb);
    Ok(loss1 + loss2)
}

/// Total model bits of every predicted level of `pyr` (all but the root).
pub fn evaluate_bits(params: &UcmParams, pyr: &VoxelPyramid) -> Result<f64> {
    let mut bits = 0.0;
    for l in 1..pyr.levels.len() {
        let level = &pyr.levels[l];
        let b = predict_level(params, &pyr.levels[l - 1], &level.coords, Some(&level.codes))?;
        bits += b.nll_bits(&level.codes);
    }
    Ok(bits)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ucm: UcmConfig,
    pub steps: usize,
    /// Clouds per step.
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ucm: UcmConfig::default(),
            steps: 300,
            batch: 4,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Bits per coded occupancy code of each step's batch.
    pub losses: Vec<f64>,
    pub param_count: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Sum of level losses (nats) and gradients for one cloud.
pub(crate) fn pyramid_loss_and_grad(params: &UcmParams, pyr: &VoxelPyramid, scale: f32) -> Result<(f64, UcmParams)> {
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for l in 1..pyr.levels.len() {
        loss += level_loss_and_grad(params, &pyr.levels[l - 1], &pyr.levels[l], scale, &mut grad)?;
    }
    Ok((loss, grad))
}

fn predicted_codes(pyr: &VoxelPyramid) -> usize {
    pyr.levels.iter().skip(1).map(|l| l.len()).sum()
}

/// Minimizes the mean per-code NLL over `corpus` with Adam. Batches are drawn
/// with a seeded RNG; per-cloud gradients run in parallel and are summed in
/// batch order.
pub fn train_ucm(corpus: &[PointCloud], cfg: &TrainConfig) -> Result<(UcmParams, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let pyramids: Vec<VoxelPyramid> = corpus.par_iter().map(build_pyramid).collect();
    let mut params = UcmParams::init(&cfg.ucm, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        param_count: params.param_count(),
    };
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pyramids.len())).collect();
        let symbols: usize = picks.iter().map(|&i| predicted_codes(&pyramids[i])).sum();
        if symbols == 0 {
            continue;
        }
        let scale = 1.0 / symbols as f32;
        let parts: Vec<(f64, UcmParams)> = picks
            .par_iter()
            .map(|&i| pyramid_loss_and_grad(&params, &pyramids[i], scale))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grad = params.zeros_like();
        for (l, g) in &parts {
            loss += l;
            grad.add_assign(g);
        }
        let bits = loss / symbols as f64 / std::f64::consts::LN_2;
        if !bits.is_finite() || !grad.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: bits as f32 });
        }
        report.losses.push(bits);
        {
            let mut ps: Vec<&mut crate::tensor::Tensor> = params.tensors_mut().into_iter().map(|(_, _, t)| t).collect();
            let gs: Vec<&crate::tensor::Tensor> = grad.tensors().into_iter().map(|(_, _, t)| t).collect();
            adam_step(&mut ps, &gs, &mut state, &adam);
        }
        if !params.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: bits as f32 });
        }
    }
    Ok((params, report))
}

/// Finite-difference check of the full model gradient on a random small
/// level. Returns `(tensor name, relative error)` for each parameter tensor
/// that receives gradient.
pub fn model_gradient_check(cfg: &UcmConfig, seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::tensor::gradcheck::{numeric_grad_smooth, rel_err, FD_STEP};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<_> = (0..rng.random_range(8..30))
        .map(|_| [rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..8)])
        .collect();
    let pyr = build_pyramid(&PointCloud::from_voxels(pts, 3)?);
    let (parents, level) = (&pyr.levels[1], &pyr.levels[2]);
    let params = UcmParams::init(cfg, seed);
    let mut grad = params.zeros_like();
    level_loss_and_grad(&params, parents, level, 1.0, &mut grad)?;
    let loss_of = |p: &UcmParams| -> f64 {
        let mut scratch = p.zeros_like();
        level_loss_and_grad(p, parents, level, 1.0, &mut scratch).unwrap()
    };
    let mut out = Vec::new();
    let names: Vec<&str> = params.tensors().iter().map(|(n, _, _)| *n).collect();
    let analytic: Vec<Vec<f32>> = grad.tensors().iter().map(|(_, _, t)| t.data.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        if analytic[ti].iter().all(|&v| v == 0.0) {
            continue;
        }
        // subsample large tensors
        let len = analytic[ti].len();
        let picks: Vec<usize> = if len <= 64 {
            (0..len).collect()
        } else {
            let mut v: Vec<usize> = (0..len).filter(|&i| analytic[ti][i] != 0.0).collect();
            while v.len() > 48 {
                v.remove(rng.random_range(0..v.len()));
            }
            v.extend((0..16).map(|_| rng.random_range(0..len)));
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut vals: Vec<f32> = picks.iter().map(|&i| params.tensors()[ti].2.data[i]).collect();
        let fd = numeric_grad_smooth(&mut vals, FD_STEP, 0.05, |vs| {
            let mut p = params.clone();
            let t = p.tensors_mut().into_iter().nth(ti).unwrap().2;
            for (&i, &v) in picks.iter().zip(vs) {
                t.data[i] = v;
            }
            loss_of(&p)
        });
        let (fd, an): (Vec<f64>, Vec<f32>) = picks.iter().zip(&fd).filter_map(|(&i, f)| f.map(|f| (f, analytic[ti][i]))).unzip();
        if !fd.is_empty() {
            out.push((name.to_string(), rel_err(&fd, &an)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ucm::Variant;

    fn cloud(seed: u64, n: usize, depth: u8) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 1u32 << depth;
        let pts = (0..n)
            .map(|_| [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)])
            .collect();
        PointCloud::from_voxels(pts, depth).unwrap()
    }

    #[test]
    fn loss_matches_prediction_bits() {
        let p = UcmParams::init(&UcmConfig::with_channels(6), 1);
        let pyr = build_pyramid(&cloud(1, 200, 5));
        let (nats, _) = pyramid_loss_and_grad(&p, &pyr, 1.0).unwrap();
        let bits = evaluate_bits(&p, &pyr).unwrap();
        assert!((nats / std::f64::consts::LN_2 - bits).abs() < 1e-3 * bits, "{nats} {bits}");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for v in Variant::all() {
            for seed in 0..2 {
                // second seed also exercises a hidden width different from the channels
                let cfg = UcmConfig {
                    channels: 4,
                    hidden: 6 * seed as usize,
                    variant: v,
                    ..UcmConfig::default()
                };
                for (name, err) in model_gradient_check(&cfg, seed).unwrap() {
                    assert!(err < 0.1, "{} seed {seed}: {name} rel err {err}", v.label());
                }
            }
        }
    }

    #[test]
    fn memorizes_identical_clouds() {
        let c = cloud(2, 60, 4);
        let corpus = vec![c.clone(); 3];
        let cfg = TrainConfig {
            ucm: UcmConfig::with_channels(8),
            steps: 300,
            batch: 1,
            lr: 1e-2,
            seed: 3,
        };
        let (params, report) = train_ucm(&corpus, &cfg).unwrap();
        let first = report.losses[0];
        let last = report.final_loss().unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
        let bits = evaluate_bits(&params, &build_pyramid(&c)).unwrap();
        assert!(bits / (build_pyramid(&c).code_count() as f64) < 1.0);
    }

    #[test]
    fn random_clouds_approach_code_entropy() {
        // Bernoulli voxels in a 4^3 grid: every scale-1 code is i.i.d. given
        // that it is nonzero, so no context can beat its entropy
        let p = 0.3f64;
        let make = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::new();
            for x in 0..4 {
                for y in 0..4 {
                    for z in 0..4 {
                        if rng.random_bool(p) {
                            pts.push([x, y, z]);
                        }
                    }
                }
            }
            pts.push([0, 0, 0]);
            PointCloud::from_voxels(pts, 2).unwrap()
        };
        let train: Vec<PointCloud> = (0..3000).map(make).collect();
        let cfg = TrainConfig {
            ucm: UcmConfig::with_channels(8),
            steps: 400,
            batch: 32,
            lr: 3e-3,
            seed: 4,
        };
        let (params, _) = train_ucm(&train, &cfg).unwrap();
        let (mut bits, mut n) = (0.0, 0usize);
        let mut counts = [0usize; 256];
        for s in 10_000..10_300 {
            let pyr = build_pyramid(&make(s));
            bits += evaluate_bits(&params, &pyr).unwrap();
            n += pyr.levels[1].len();
            for &c in &pyr.levels[1].codes {
                counts[c as usize] += 1;
            }
        }
        let h = |q: f64| -q * q.log2() - (1.0 - q) * (1.0 - q).log2();
        let q0 = (1.0 - p).powi(8);
        let analytic = (8.0 * h(p) - h(q0)) / (1.0 - q0);
        let empirical: f64 = counts
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| -(k as f64 / n as f64) * (k as f64 / n as f64).log2())
            .sum();
        let model = bits / n as f64;
        assert!(
            (model - analytic).abs() < 0.2,
            "model {model} analytic {analytic} empirical {empirical}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<PointCloud> = (0..3).map(|s| cloud(s, 100, 4)).collect();
        let cfg = TrainConfig {
            ucm: UcmConfig::with_channels(4),
            steps: 5,
            batch: 3,
            lr: 1e-2,
            seed: 9,
        };
        let (a, ra) = train_ucm(&corpus, &cfg).unwrap();
        let (b, rb) = train_ucm(&corpus, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.losses, rb.losses);
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = vec![cloud(1, 50, 4)];
        let cfg = TrainConfig {
            ucm: UcmConfig::with_channels(4),
            steps: 3,
            batch: 1,
            lr: f32::NAN,
            seed: 0,
        };
        assert!(matches!(train_ucm(&corpus, &cfg), Err(Error::TrainingDiverged { .. })));
    }
}
