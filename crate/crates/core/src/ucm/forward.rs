use super::params::{Head, UcmParams};
use super::{merge_code, partition_checkerboard, split_code, GroupPartition, NibblePmf};
use crate::geometry::{child_bit, parent_of};
use crate::geometry::{key, Coord, OccupancyLevel};
use crate::tensor::{relu, softmax, Mat, NeighborMap, SparseFeatureMap};
use crate::{Error, Result};

/// Activations of the backbone for one level transition.
#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    pub parent_codes: Vec<u8>,
    pub parent_index: Vec<usize>,
    pub child_bits: Vec<u8>,
    pub nbr_parent: NeighborMap,
    pub nbr_child: NeighborMap,
    pub z0: Mat,
    pub a1: Mat,
    pub z1: Mat,
    pub a2: Mat,
    pub u: Mat,
    pub a3: Mat,
    pub f: Mat,
}

fn residual_relu(x: &Mat, a: &Mat) -> Mat {
    let mut out = x.clone();
    for (o, &v) in out.data.iter_mut().zip(&a.data) {
        *o += v.max(0.0);
    }
    out
}

pub(crate) fn backbone(params: &UcmParams, parents: &OccupancyLevel, children: &[Coord]) -> Result<Backbone> {
    backbone_with(params, parents, children, None)
}

/// Backbone with an optional additive perturbation of one parent's input
/// embedding row.
pub(crate) fn backbone_with(
    params: &UcmParams,
    parents: &OccupancyLevel,
    children: &[Coord],
    perturb: Option<(usize, &[f32])>,
) -> Result<Backbone> {
    if parents.coords.len() != parents.codes.len() {
        return Err(Error::InvariantViolation("parent coords/codes length mismatch".into()));
    }
    let parent_keys: Vec<u64> = parents.coords.iter().map(|&c| key(c)).collect();
    let mut parent_index = Vec::with_capacity(children.len());
    let mut child_bits = Vec::with_capacity(children.len());
    let mut expected = 0usize;
    let mut prev: Option<u64> = None;
    for &c in children {
        let k = key(c);
        if prev.is_some_and(|p| p >= k) {
            return Err(Error::InvariantViolation("child coords not strictly sorted".into()));
        }
        prev = Some(k);
        let pi = parent_keys
            .binary_search(&key(parent_of(c)))
            .map_err(|_| Error::InvariantViolation(format!("child {c:?} has no parent")))?;
        let bit = child_bit(c);
        if parents.codes[pi] & (1 << bit) == 0 {
            return Err(Error::InvariantViolation(format!("child {c:?} not in its parent's code")));
        }
        parent_index.push(pi);
        child_bits.push(bit);
        expected += 1;
    }
    let total: usize = parents.codes.iter().map(|c| c.count_ones() as usize).sum();
    if expected != total {
        return Err(Error::InvariantViolation(format!(
            "{} children given but parent codes describe {total}",
            children.len()
        )));
    }

    let nbr_parent = NeighborMap::build(&parents.coords, &parents.coords, &params.prior_a.offsets);
    let mut z0 = params.code_emb.lookup(&parents.codes);
    if let Some((row, delta)) = perturb {
        crate::tensor::axpy(1.0, delta, z0.row_mut(row));
    }
    let a1 = nbr_parent.conv(&z0, &params.prior_a)?;
    let z1 = residual_relu(&z0, &a1);
    let a2 = nbr_parent.conv(&z1, &params.prior_b)?;
    let z = residual_relu(&z1, &a2);

    let mut u = z.gather(&parent_index);
    params.offset_emb.add_to(&child_bits, &mut u);
    let nbr_child = NeighborMap::build(children, children, &params.target.offsets);
    let a3 = nbr_child.conv(&u, &params.target)?;
    let f = residual_relu(&u, &a3);
    Ok(Backbone {
        parent_codes: parents.codes.clone(),
        parent_index,
        child_bits,
        nbr_parent,
        nbr_child,
        z0,
        a1,
        z1,
        a2,
        u,
        a3,
        f,
    })
}

/// G2 context activations.
#[derive(Clone, Debug)]
pub(crate) struct G2Trace {
    pub nbr: Option<NeighborMap>,
    pub fhat: Mat,
    pub cat: Mat,
    pub fuse_pre: Mat,
    pub ctx: Mat,
}

/// Context rows for one checkerboard group, aligned with the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupContext {
    pub rows: Mat,
}

/// Backbone output for one level plus the per-stage evaluators.
#[derive(Clone, Debug)]
pub struct LevelModel<'p> {
    params: &'p UcmParams,
    pub(crate) backbone: Backbone,
    children: Vec<Coord>,
    partition: GroupPartition,
}

impl<'p> LevelModel<'p> {
    /// Runs the backbone: `children` must be exactly the voxels described by
    /// `parents`' codes.
    pub fn new(params: &'p UcmParams, parents: &OccupancyLevel, children: &[Coord]) -> Result<Self> {
        let backbone = backbone(params, parents, children)?;
        let partition = if params.cfg.variant.spatial_groups {
            partition_checkerboard(children)
        } else {
            GroupPartition {
                g1: (0..children.len()).collect(),
                g2: Vec::new(),
            }
        };
        Ok(Self {
            params,
            backbone,
            children: children.to_vec(),
            partition,
        })
    }

    pub fn params(&self) -> &UcmParams {
        self.params
    }

    pub fn children(&self) -> &[Coord] {
        &self.children
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    /// Context field over the finer scale.
    pub fn context(&self) -> SparseFeatureMap {
        SparseFeatureMap {
            coords: self.children.clone(),
            feats: self.backbone.f.clone(),
        }
    }

    pub fn g1_context(&self) -> GroupContext {
        GroupContext {
            rows: self.backbone.f.gather(&self.partition.g1),
        }
    }

    pub(crate) fn g2_trace(&self, g1_codes: &[u8]) -> Result<G2Trace> {
        let p = self.params;
        if g1_codes.len() != self.partition.g1.len() {
            return Err(Error::InvariantViolation(format!(
                "{} G1 codes for {} G1 voxels",
                g1_codes.len(),
                self.partition.g1.len()
            )));
        }
        let f_g2 = self.backbone.f.gather(&self.partition.g2);
        if !p.cfg.variant.aggregates() {
            return Ok(G2Trace {
                nbr: None,
                fhat: Mat::zeros(0, 0),
                cat: Mat::zeros(0, 0),
                fuse_pre: Mat::zeros(0, 0),
                ctx: f_g2,
            });
        }
        let mut fhat = self.backbone.f.gather(&self.partition.g1);
        p.prior_code_emb.add_to(g1_codes, &mut fhat);
        let g1_coords: Vec<Coord> = self.partition.g1.iter().map(|&i| self.children[i]).collect();
        let g2_coords: Vec<Coord> = self.partition.g2.iter().map(|&i| self.children[i]).collect();
        let nbr = NeighborMap::build(&g1_coords, &g2_coords, &p.agg.offsets);
        let agg = nbr.conv(&fhat, &p.agg)?;
        let cat = f_g2.concat_cols(&agg);
        let fuse_pre = p.fuse.forward(&cat)?;
        let ctx = residual_relu(&f_g2, &fuse_pre);
        Ok(G2Trace {
            nbr: Some(nbr),
            fhat,
            cat,
            fuse_pre,
            ctx,
        })
    }

    /// G2 context after aggregating the decoded G1 codes (full 8-bit codes,
    /// aligned with `partition().g1`).
    pub fn g2_context(&self, g1_codes: &[u8]) -> Result<GroupContext> {
        Ok(GroupContext {
            rows: self.g2_trace(g1_codes)?.ctx,
        })
    }

    /// Head input rows: `relu(trunk(x))`.
    pub fn head_inputs(&self, head: Head, x: &Mat) -> Result<Mat> {
        Ok(relu(&self.params.trunk(head).forward(x)?))
    }

    fn high_input(&self, head: Head, ctx: &GroupContext, lows: &[u8]) -> Result<Mat> {
        if lows.len() != ctx.rows.rows {
            return Err(Error::ContractViolation(format!(
                "{} low nibbles for {} voxels",
                lows.len(),
                ctx.rows.rows
            )));
        }
        if lows.iter().any(|&l| l > 15) {
            return Err(Error::InvalidInput("low nibble out of range".into()));
        }
        let mut x = ctx.rows.clone();
        let emb = if head == Head::G1High {
            &self.params.nibble_emb_g1
        } else {
            &self.params.nibble_emb_g2
        };
        emb.add_to(lows, &mut x);
        Ok(x)
    }

    /// Stage input rows for `head` (trunk input), given the conditioning low
    /// nibbles for high heads.
    pub fn stage_input(&self, head: Head, ctx: &GroupContext, lows: Option<&[u8]>) -> Result<Mat> {
        match head {
            Head::G1Low | Head::G2Low => Ok(ctx.rows.clone()),
            Head::G1High | Head::G2High => {
                let lows = lows.ok_or_else(|| Error::ContractViolation("high-nibble stage needs the low nibbles".into()))?;
                self.high_input(head, ctx, lows)
            }
        }
    }

    fn logits(&self, head: Head, x: &Mat) -> Result<Mat> {
        let t = self.head_inputs(head, x)?;
        self.params.head(head).forward(&t)
    }

    fn full_code_pmfs(&self, low_head: Head, ctx: &GroupContext) -> Result<Vec<[f32; 256]>> {
        let logits = self.logits(low_head, &ctx.rows)?;
        let mut out = vec![[0f32; 256]; logits.rows];
        for (r, o) in out.iter_mut().enumerate() {
            softmax(logits.row(r), o);
        }
        Ok(out)
    }

    /// Low-nibble probabilities for G1 (`Head::G1Low`) or G2 (`Head::G2Low`).
    pub fn low_pmfs(&self, head: Head, ctx: &GroupContext) -> Result<Vec<NibblePmf>> {
        debug_assert!(matches!(head, Head::G1Low | Head::G2Low));
        if !self.params.cfg.variant.channel_groups {
            return Ok(self
                .full_code_pmfs(head, ctx)?
                .iter()
                .map(|joint| {
                    let mut m = [0f32; 16];
                    for (o, &p) in joint.iter().enumerate() {
                        m[o & 15] += p;
                    }
                    m
                })
                .collect());
        }
        let logits = self.logits(head, &ctx.rows)?;
        let mut out = vec![[0f32; 16]; logits.rows];
        for (r, o) in out.iter_mut().enumerate() {
            softmax(logits.row(r), o);
        }
        Ok(out)
    }

    /// High-nibble probabilities given each voxel's low nibble.
    pub fn high_pmfs(&self, head: Head, ctx: &GroupContext, lows: &[u8]) -> Result<Vec<NibblePmf>> {
        debug_assert!(matches!(head, Head::G1High | Head::G2High));
        if !self.params.cfg.variant.channel_groups {
            if lows.len() != ctx.rows.rows {
                return Err(Error::ContractViolation("low nibble count mismatch".into()));
            }
            let low_head = if head == Head::G1High { Head::G1Low } else { Head::G2Low };
            return Ok(self
                .full_code_pmfs(low_head, ctx)?
                .iter()
                .zip(lows)
                .map(|(joint, &l)| {
                    let mut c = [0f32; 16];
                    for (h, v) in c.iter_mut().enumerate() {
                        *v = joint[usize::from(l) | (h << 4)];
                    }
                    let s: f32 = c.iter().sum();
                    if s > 0.0 {
                        c.iter_mut().for_each(|v| *v /= s);
                    } else {
                        c = [1.0 / 16.0; 16];
                    }
                    c
                })
                .collect());
        }
        let x = self.high_input(head, ctx, lows)?;
        let logits = self.logits(head, &x)?;
        let mut out = vec![[0f32; 16]; logits.rows];
        for (r, o) in out.iter_mut().enumerate() {
            softmax(logits.row(r), o);
        }
        Ok(out)
    }

    /// Unnormalized-for-zero joint code distribution `P(o) = P(low) P(high | low)`
    /// per voxel of the group (`Head::G1Low` or `Head::G2Low` selects it),
    /// evaluating the high head for all 16 candidate low nibbles.
    pub fn joint_pmfs(&self, low_head: Head, ctx: &GroupContext) -> Result<Vec<[f32; 256]>> {
        if !self.params.cfg.variant.channel_groups {
            return self.full_code_pmfs(low_head, ctx);
        }
        let high_head = if low_head == Head::G1Low { Head::G1High } else { Head::G2High };
        let lows = self.low_pmfs(low_head, ctx)?;
        let n = ctx.rows.rows;
        let mut out = vec![[0f32; 256]; n];
        for cand in 0..16u8 {
            let highs = self.high_pmfs(high_head, ctx, &vec![cand; n])?;
            for r in 0..n {
                for h in 0..16 {
                    out[r][usize::from(cand) | (h << 4)] = lows[r][usize::from(cand)] * highs[r][h];
                }
            }
        }
        Ok(out)
    }
}

/// Per-stage probability tables for one level, aligned with the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub partition: GroupPartition,
    pub g1_low: Vec<NibblePmf>,
    pub g1_high: Vec<NibblePmf>,
    pub g2_low: Vec<NibblePmf>,
    pub g2_high: Vec<NibblePmf>,
}

impl PredictionBundle {
    /// `sum -log2 p(symbol)` over all four stages for `codes` (child order).
    pub fn nll_bits(&self, codes: &[u8]) -> f64 {
        let mut bits = 0.0;
        for (group, low, high) in [
            (&self.partition.g1, &self.g1_low, &self.g1_high),
            (&self.partition.g2, &self.g2_low, &self.g2_high),
        ] {
            for (r, &i) in group.iter().enumerate() {
                let (l, h) = split_code(codes[i]);
                bits -= f64::from(low[r][usize::from(l)]).log2();
                bits -= f64::from(high[r][usize::from(h)]).log2();
            }
        }
        bits
    }
}

/// Teacher-forced prediction of a full level. `codes` are the true codes of
/// the `children` voxels; streaming callers use [`LevelPredictor`].
pub fn predict_level(params: &UcmParams, parents: &OccupancyLevel, children: &[Coord], codes: Option<&[u8]>) -> Result<PredictionBundle> {
    let codes = codes.ok_or_else(|| Error::ContractViolation("conditioning codes required; decode through LevelPredictor".into()))?;
    if codes.len() != children.len() {
        return Err(Error::InvariantViolation("one code per child voxel expected".into()));
    }
    let mut pred = LevelPredictor::new(params, parents, children)?;
    let part = pred.model().partition().clone();
    let pick = |idx: &[usize], hi: bool| -> Vec<u8> {
        idx.iter()
            .map(|&i| {
                let (l, h) = split_code(codes[i]);
                if hi {
                    h
                } else {
                    l
                }
            })
            .collect()
    };
    let g1_low = pred.g1_low()?;
    let g1_high = pred.g1_high(&pick(&part.g1, false))?;
    let g2_low = pred.g2_low(&pick(&part.g1, true))?;
    let g2_high = pred.g2_high(&pick(&part.g2, false))?;
    pred.finish(&pick(&part.g2, true))?;
    Ok(PredictionBundle {
        partition: part,
        g1_low,
        g1_high,
        g2_low,
        g2_high,
    })
}

/// Stage-by-stage predictor shared by encoder and decoder. Each call takes the
/// symbols of the previous stage, so the decoder can interleave decoding with
/// prediction; calls out of order fail with `ContractViolation`.
#[derive(Debug)]
pub struct LevelPredictor<'p> {
    model: LevelModel<'p>,
    next: usize,
    g1_ctx: Option<GroupContext>,
    g1_low: Vec<u8>,
    g1_codes: Vec<u8>,
    g2_ctx: Option<GroupContext>,
    g2_low: Vec<u8>,
}

impl<'p> LevelPredictor<'p> {
    pub fn new(params: &'p UcmParams, parents: &OccupancyLevel, children: &[Coord]) -> Result<Self> {
        Ok(Self {
            model: LevelModel::new(params, parents, children)?,
            next: 0,
            g1_ctx: None,
            g1_low: Vec::new(),
            g1_codes: Vec::new(),
            g2_ctx: None,
            g2_low: Vec::new(),
        })
    }

    pub fn model(&self) -> &LevelModel<'p> {
        &self.model
    }

    fn advance(&mut self, stage: usize, name: &str) -> Result<()> {
        if self.next != stage {
            return Err(Error::ContractViolation(format!(
                "{name} called out of order (expected stage {})",
                self.next
            )));
        }
        self.next += 1;
        Ok(())
    }

    fn check_len(symbols: &[u8], n: usize, what: &str) -> Result<()> {
        if symbols.len() != n {
            return Err(Error::ContractViolation(format!(
                "{what}: {} symbols for {n} voxels",
                symbols.len()
            )));
        }
        if symbols.iter().any(|&s| s > 15) {
            return Err(Error::InvalidInput(format!("{what}: nibble out of range")));
        }
        Ok(())
    }

    pub fn g1_low(&mut self) -> Result<Vec<NibblePmf>> {
        self.advance(0, "g1_low")?;
        let ctx = self.model.g1_context();
        let out = self.model.low_pmfs(Head::G1Low, &ctx)?;
        self.g1_ctx = Some(ctx);
        Ok(out)
    }

    pub fn g1_high(&mut self, g1_low: &[u8]) -> Result<Vec<NibblePmf>> {
        self.advance(1, "g1_high")?;
        Self::check_len(g1_low, self.model.partition.g1.len(), "g1 low nibbles")?;
        self.g1_low = g1_low.to_vec();
        self.model.high_pmfs(Head::G1High, self.g1_ctx.as_ref().unwrap(), g1_low)
    }

    pub fn g2_low(&mut self, g1_high: &[u8]) -> Result<Vec<NibblePmf>> {
        self.advance(2, "g2_low")?;
        Self::check_len(g1_high, self.model.partition.g1.len(), "g1 high nibbles")?;
        self.g1_codes = self
            .g1_low
            .iter()
            .zip(g1_high)
            .map(|(&l, &h)| merge_code(l, h))
            .collect::<Result<_>>()?;
        let ctx = self.model.g2_context(&self.g1_codes)?;
        let out = self.model.low_pmfs(Head::G2Low, &ctx)?;
        self.g2_ctx = Some(ctx);
        Ok(out)
    }

    pub fn g2_high(&mut self, g2_low: &[u8]) -> Result<Vec<NibblePmf>> {
        self.advance(3, "g2_high")?;
        Self::check_len(g2_low, self.model.partition.g2.len(), "g2 low nibbles")?;
        self.g2_low = g2_low.to_vec();
        self.model.high_pmfs(Head::G2High, self.g2_ctx.as_ref().unwrap(), g2_low)
    }

    /// Merges everything into codes in child (Morton) order.
    pub fn finish(mut self, g2_high: &[u8]) -> Result<Vec<u8>> {
        self.advance(4, "finish")?;
        Self::check_len(g2_high, self.model.partition.g2.len(), "g2 high nibbles")?;
        let mut codes = vec![0u8; self.model.children.len()];
        for (&i, &c) in self.model.partition.g1.iter().zip(&self.g1_codes) {
            codes[i] = c;
        }
        for ((&i, &l), &h) in self.model.partition.g2.iter().zip(&self.g2_low).zip(g2_high) {
            codes[i] = merge_code(l, h)?;
        }
        Ok(codes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pyramid, o2v, PointCloud};
    use crate::tensor::DenseLayer;
    use crate::ucm::{UcmConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, depth: u8) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 1u32 << depth;
        let pts = (0..n)
            .map(|_| [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side / 2)])
            .collect();
        PointCloud::from_voxels(pts, depth).unwrap()
    }

    fn params(c: usize, seed: u64) -> UcmParams {
        UcmParams::init(&UcmConfig::with_channels(c), seed)
    }

    #[test]
    fn zero_params_give_zero_context_and_uniform_pmfs() {
        let p = UcmParams::zeros(&UcmConfig::with_channels(4));
        let pyr = build_pyramid(&random_cloud(1, 60, 5));
        let level = &pyr.levels[3];
        let children = level.children().unwrap();
        let m = LevelModel::new(&p, level, &children).unwrap();
        assert!(m.context().feats.data.iter().all(|&v| v == 0.0));
        let pmfs = m.low_pmfs(Head::G1Low, &m.g1_context()).unwrap();
        for pmf in pmfs {
            assert!(pmf.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-7));
        }
    }

    #[test]
    fn single_parent_children_differ_only_by_offset_embedding() {
        let mut p = params(4, 2);
        let parent = OccupancyLevel {
            scale: 0,
            coords: vec![[0, 0, 0]],
            codes: vec![255],
        };
        let children = o2v(&parent.coords, &parent.codes).unwrap();
        // same weights for every offset: each child sums the same 8 rows
        let slab = p.target.w.data[..16].to_vec();
        for k in 0..p.target.offsets.len() {
            p.target.w.data[k * 16..(k + 1) * 16].copy_from_slice(&slab);
        }
        let rows = |p: &UcmParams| LevelModel::new(p, &parent, &children).unwrap().context().feats;
        let f = rows(&p);
        assert_eq!(f.rows, 8);
        for i in 1..8 {
            assert_ne!(f.row(0), f.row(i));
        }
        p.offset_emb.table.fill(0.0);
        let f = rows(&p);
        for i in 1..8 {
            assert_eq!(f.row(0), f.row(i));
        }
    }

    #[test]
    fn pmfs_are_normalized_and_replay_matches_teacher_forcing() {
        let p = params(8, 3);
        let pyr = build_pyramid(&random_cloud(2, 300, 6));
        for l in 1..pyr.levels.len() {
            let parents = &pyr.levels[l - 1];
            let level = &pyr.levels[l];
            let bundle = predict_level(&p, parents, &level.coords, Some(&level.codes)).unwrap();
            for pmf in bundle
                .g1_low
                .iter()
                .chain(&bundle.g1_high)
                .chain(&bundle.g2_low)
                .chain(&bundle.g2_high)
            {
                let s: f32 = pmf.iter().sum();
                assert!((s - 1.0).abs() < 1e-5 && pmf.iter().all(|&v| v >= 0.0));
            }
            // decoder-side replay: feed back symbols stage by stage
            let mut pred = LevelPredictor::new(&p, parents, &level.coords).unwrap();
            let part = pred.model().partition().clone();
            let nib = |idx: &[usize], hi: bool| -> Vec<u8> {
                idx.iter()
                    .map(|&i| if hi { level.codes[i] >> 4 } else { level.codes[i] & 15 })
                    .collect()
            };
            assert_eq!(pred.g1_low().unwrap(), bundle.g1_low);
            assert_eq!(pred.g1_high(&nib(&part.g1, false)).unwrap(), bundle.g1_high);
            assert_eq!(pred.g2_low(&nib(&part.g1, true)).unwrap(), bundle.g2_low);
            assert_eq!(pred.g2_high(&nib(&part.g2, false)).unwrap(), bundle.g2_high);
            assert_eq!(pred.finish(&nib(&part.g2, true)).unwrap(), level.codes);
            // symbol count: two nibbles per voxel
            let n = bundle.g1_low.len() + bundle.g1_high.len() + bundle.g2_low.len() + bundle.g2_high.len();
            assert_eq!(n, 2 * level.len());
            let direct: f64 = bundle.nll_bits(&level.codes);
            assert!(direct.is_finite() && direct > 0.0);
        }
    }

    #[test]
    fn stage_order_is_enforced() {
        let p = params(4, 4);
        let pyr = build_pyramid(&random_cloud(3, 40, 4));
        let mut pred = LevelPredictor::new(&p, &pyr.levels[1], &pyr.levels[2].coords).unwrap();
        assert!(matches!(pred.g1_high(&[]), Err(Error::ContractViolation(_))));
        pred.g1_low().unwrap();
        assert!(matches!(pred.g2_low(&[]), Err(Error::ContractViolation(_))));
        assert!(predict_level(&p, &pyr.levels[1], &pyr.levels[2].coords, None).is_err());
    }

    #[test]
    fn mismatched_children_rejected() {
        let p = params(4, 4);
        let pyr = build_pyramid(&random_cloud(3, 40, 4));
        let mut wrong = pyr.levels[2].coords.clone();
        wrong.pop();
        assert!(matches!(
            LevelModel::new(&p, &pyr.levels[1], &wrong),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn high_stage_depends_on_low_nibble() {
        let p = params(8, 5);
        let pyr = build_pyramid(&random_cloud(4, 80, 5));
        let m = LevelModel::new(&p, &pyr.levels[2], &pyr.levels[3].coords).unwrap();
        let ctx = m.g1_context();
        let n = ctx.rows.rows;
        let a = m.high_pmfs(Head::G1High, &ctx, &vec![1; n]).unwrap();
        let b = m.high_pmfs(Head::G1High, &ctx, &vec![9; n]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn future_symbols_cannot_leak_into_earlier_stages() {
        let p = params(8, 6);
        let pyr = build_pyramid(&random_cloud(5, 400, 6));
        let (parents, level) = (&pyr.levels[4], &pyr.levels[5]);
        let truth = predict_level(&p, parents, &level.coords, Some(&level.codes)).unwrap();
        let part = &truth.partition;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // garbage in G2 high nibbles
        let mut codes = level.codes.clone();
        for &i in &part.g2 {
            codes[i] = (codes[i] & 15) | (rng.random_range(1..16u8) << 4);
        }
        let b = predict_level(&p, parents, &level.coords, Some(&codes)).unwrap();
        assert_eq!(
            (&b.g1_low, &b.g1_high, &b.g2_low, &b.g2_high),
            (&truth.g1_low, &truth.g1_high, &truth.g2_low, &truth.g2_high)
        );
        // garbage in all G2 symbols: G1 stages and G2 low-nibble tables unchanged
        for &i in &part.g2 {
            codes[i] = rng.random_range(1..=255u8);
        }
        let b = predict_level(&p, parents, &level.coords, Some(&codes)).unwrap();
        assert_eq!((&b.g1_low, &b.g1_high, &b.g2_low), (&truth.g1_low, &truth.g1_high, &truth.g2_low));
        // garbage in G1 high nibbles leaves G1 stages unchanged
        for &i in &part.g1 {
            codes[i] = (codes[i] & 15) | (rng.random_range(1..16u8) << 4);
        }
        let b = predict_level(&p, parents, &level.coords, Some(&codes)).unwrap();
        assert_eq!((&b.g1_low, &b.g1_high), (&truth.g1_low, &truth.g1_high));
    }

    #[test]
    fn g1_tables_do_not_depend_on_other_g1_symbols() {
        let p = params(8, 7);
        let pyr = build_pyramid(&random_cloud(6, 300, 6));
        let m = LevelModel::new(&p, &pyr.levels[4], &pyr.levels[5].coords).unwrap();
        let ctx = m.g1_context();
        let n = ctx.rows.rows;
        assert!(n > 3);
        let base: Vec<u8> = (0..n).map(|i| (i % 16) as u8).collect();
        let a = m.high_pmfs(Head::G1High, &ctx, &base).unwrap();
        let mut other = base.clone();
        for v in other.iter_mut().skip(1) {
            *v = 15 - *v;
        }
        let b = m.high_pmfs(Head::G1High, &ctx, &other).unwrap();
        assert_eq!(a[0], b[0]);
        // a permuted coding order yields the same per-voxel tables
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows = GroupContext {
            rows: ctx.rows.gather(&perm),
        };
        let lows = m.low_pmfs(Head::G1Low, &rows).unwrap();
        let direct = m.low_pmfs(Head::G1Low, &ctx).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(lows[k], direct[i]);
        }
    }

    #[test]
    fn g2_aggregation_sees_only_neighbouring_g1_codes() {
        let p = params(8, 8);
        let pyr = build_pyramid(&random_cloud(7, 500, 6));
        let m = LevelModel::new(&p, &pyr.levels[4], &pyr.levels[5].coords).unwrap();
        let part = m.partition().clone();
        let children = m.children().to_vec();
        let codes: Vec<u8> = part.g1.iter().map(|&i| pyr.levels[5].codes[i]).collect();
        let base = m.g2_context(&codes).unwrap();
        let target = 0usize;
        let tj = children[part.g2[target]];
        let mut checked = (0, 0);
        for (k, &gi) in part.g1.iter().enumerate() {
            let mut changed = codes.clone();
            changed[k] = if changed[k] == 1 { 2 } else { 1 };
            let ctx = m.g2_context(&changed).unwrap();
            let c = children[gi];
            let near = (0..3).all(|a| c[a].abs_diff(tj[a]) <= 1);
            assert_eq!(ctx.rows.row(target) != base.rows.row(target), near, "{c:?} vs {tj:?}");
            if near {
                checked.0 += 1
            } else {
                checked.1 += 1
            }
        }
        assert!(checked.1 > 0);
    }

    #[test]
    fn disabled_aggregation_ignores_g1_codes() {
        let mut p = params(8, 9);
        let pyr = build_pyramid(&random_cloud(8, 300, 6));
        p.prior_code_emb.table.fill(0.0);
        p.agg.w.fill(0.0);
        p.agg.b.fill(0.0);
        let m = LevelModel::new(&p, &pyr.levels[4], &pyr.levels[5].coords).unwrap();
        let n1 = m.partition().g1.len();
        let a = m.g2_context(&vec![1; n1]).unwrap();
        let b = m.g2_context(&vec![200; n1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_even_level_skips_g2() {
        let p = params(4, 10);
        let parent = OccupancyLevel {
            scale: 0,
            coords: vec![[0, 0, 0]],
            codes: vec![1],
        };
        let children = o2v(&parent.coords, &parent.codes).unwrap();
        let mut pred = LevelPredictor::new(&p, &parent, &children).unwrap();
        assert_eq!(pred.g1_low().unwrap().len(), 1);
        pred.g1_high(&[1]).unwrap();
        assert!(pred.g2_low(&[0]).unwrap().is_empty());
        assert!(pred.g2_high(&[]).unwrap().is_empty());
        assert_eq!(pred.finish(&[]).unwrap(), vec![1]);
    }

    #[test]
    fn joint_is_product_of_cascade() {
        let p = params(8, 11);
        let pyr = build_pyramid(&random_cloud(9, 200, 5));
        let (parents, level) = (&pyr.levels[3], &pyr.levels[4]);
        let m = LevelModel::new(&p, parents, &level.coords).unwrap();
        let ctx = m.g1_context();
        let joint = m.joint_pmfs(Head::G1Low, &ctx).unwrap();
        let low = m.low_pmfs(Head::G1Low, &ctx).unwrap();
        for (r, j) in joint.iter().enumerate() {
            assert!((j.iter().sum::<f32>() - 1.0).abs() < 1e-4);
            for l in 0..16 {
                let marg: f32 = (0..16).map(|h| j[l | (h << 4)]).sum();
                assert!((marg - low[r][l]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_code_head_variant_factorizes_exactly() {
        let cfg = UcmConfig {
            channels: 8,
            variant: Variant {
                channel_groups: false,
                ..Variant::FULL
            },
            ..UcmConfig::default()
        };
        let p = UcmParams::init(&cfg, 12);
        assert_eq!(p.head_g1_0.output_dim(), 256);
        let pyr = build_pyramid(&random_cloud(10, 200, 5));
        let (parents, level) = (&pyr.levels[3], &pyr.levels[4]);
        let bundle = predict_level(&p, parents, &level.coords, Some(&level.codes)).unwrap();
        let m = LevelModel::new(&p, parents, &level.coords).unwrap();
        let joint = m.joint_pmfs(Head::G1Low, &m.g1_context()).unwrap();
        for (r, &i) in bundle.partition.g1.iter().enumerate() {
            let (l, h) = split_code(level.codes[i]);
            let cascade = bundle.g1_low[r][l as usize] * bundle.g1_high[r][h as usize];
            assert!((cascade - joint[r][level.codes[i] as usize]).abs() < 1e-6);
        }
        let _ = DenseLayer::zeros(1, 1);
    }
}
