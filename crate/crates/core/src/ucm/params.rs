use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{cube_offsets, read_tensors, write_tensors, DenseLayer, Embedding, SparseConvKernel, Tensor};
use crate::{Error, Result};

/// Which context-model components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// G2 aggregation of decoded G1 neighbours through a sparse conv.
    pub spatial_conv: bool,
    /// Two-phase checkerboard split; when off every voxel is in G1.
    pub spatial_groups: bool,
    /// Low/high nibble cascade; when off one head predicts the full code.
    pub channel_groups: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        spatial_conv: true,
        spatial_groups: true,
        channel_groups: true,
    };

    pub const BASELINE: Variant = Variant {
        spatial_conv: false,
        spatial_groups: false,
        channel_groups: false,
    };

    /// All eight on/off combinations, baseline first.
    pub fn all() -> [Variant; 8] {
        let mut out = [Variant::BASELINE; 8];
        for (i, v) in out.iter_mut().enumerate() {
            v.spatial_conv = i & 1 != 0;
            v.spatial_groups = i & 2 != 0;
            v.channel_groups = i & 4 != 0;
        }
        out
    }

    /// Aggregation only exists when there is a G1 phase to aggregate from.
    pub fn aggregates(&self) -> bool {
        self.spatial_conv && self.spatial_groups
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.spatial_conv {
            parts.push("SC");
        }
        if self.spatial_groups {
            parts.push("SG");
        }
        if self.channel_groups {
            parts.push("CG");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// `full`, `baseline`, or components joined by `+` (`SC+SG`, `cg`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "full" => return Ok(Variant::FULL),
            "baseline" | "none" => return Ok(Variant::BASELINE),
            _ => {}
        }
        let mut v = Variant::BASELINE;
        for part in s.split('+') {
            match part.trim() {
                "sc" => v.spatial_conv = true,
                "sg" => v.spatial_groups = true,
                "cg" => v.channel_groups = true,
                other => return Err(Error::InvalidInput(format!("unknown model component '{other}'"))),
            }
        }
        Ok(v)
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UcmConfig {
    pub channels: usize,
    /// Radius of the backbone sparse-conv kernels (1 gives 3^3).
    pub kernel_radius: i32,
    /// Radius of the G2 aggregation neighbourhood (1 gives 3^3).
    pub neighborhood_radius: i32,
    pub variant: Variant,
    /// Width of the stage MLP hidden layer; 0 means `channels`.
    #[serde(default)]
    pub hidden: usize,
}

impl Default for UcmConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel_radius: 1,
            neighborhood_radius: 1,
            variant: Variant::FULL,
            hidden: 0,
        }
    }
}

impl UcmConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.channels
        } else {
            self.hidden
        }
    }

    /// Output width of the stage-0 heads.
    pub fn low_classes(&self) -> usize {
        if self.variant.channel_groups {
            16
        } else {
            256
        }
    }
}

/// One of the four prediction heads, in coding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    G1Low,
    G1High,
    G2Low,
    G2High,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::G1Low, Head::G1High, Head::G2Low, Head::G2High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::G1Low => "g1_0",
            Head::G1High => "g1_1",
            Head::G2Low => "g2_0",
            Head::G2High => "g2_1",
        }
    }
}

/// Every parameter of the context model. The four `head_*` layers are the
/// tunable set; everything else is the frozen backbone. One instance serves
/// every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct UcmParams {
    pub cfg: UcmConfig,
    pub code_emb: Embedding,
    pub prior_a: SparseConvKernel,
    pub prior_b: SparseConvKernel,
    pub offset_emb: Embedding,
    pub target: SparseConvKernel,
    pub prior_code_emb: Embedding,
    pub agg: SparseConvKernel,
    pub fuse: DenseLayer,
    pub nibble_emb_g1: Embedding,
    pub nibble_emb_g2: Embedding,
    pub trunk_g1_0: DenseLayer,
    pub trunk_g1_1: DenseLayer,
    pub trunk_g2_0: DenseLayer,
    pub trunk_g2_1: DenseLayer,
    pub head_g1_0: DenseLayer,
    pub head_g1_1: DenseLayer,
    pub head_g2_0: DenseLayer,
    pub head_g2_1: DenseLayer,
}

macro_rules! param_list {
    ($p:ident; $($r:tt)+) => {
        vec![
            ("code_emb", false, $($r)+ $p.code_emb.table),
            ("prior_a.w", false, $($r)+ $p.prior_a.w),
            ("prior_a.b", false, $($r)+ $p.prior_a.b),
            ("prior_b.w", false, $($r)+ $p.prior_b.w),
            ("prior_b.b", false, $($r)+ $p.prior_b.b),
            ("offset_emb", false, $($r)+ $p.offset_emb.table),
            ("target.w", false, $($r)+ $p.target.w),
            ("target.b", false, $($r)+ $p.target.b),
            ("prior_code_emb", false, $($r)+ $p.prior_code_emb.table),
            ("agg.w", false, $($r)+ $p.agg.w),
            ("agg.b", false, $($r)+ $p.agg.b),
            ("fuse.w", false, $($r)+ $p.fuse.w),
            ("fuse.b", false, $($r)+ $p.fuse.b),
            ("nibble_emb_g1", false, $($r)+ $p.nibble_emb_g1.table),
            ("nibble_emb_g2", false, $($r)+ $p.nibble_emb_g2.table),
            ("trunk_g1_0.w", false, $($r)+ $p.trunk_g1_0.w),
            ("trunk_g1_0.b", false, $($r)+ $p.trunk_g1_0.b),
            ("trunk_g1_1.w", false, $($r)+ $p.trunk_g1_1.w),
            ("trunk_g1_1.b", false, $($r)+ $p.trunk_g1_1.b),
            ("trunk_g2_0.w", false, $($r)+ $p.trunk_g2_0.w),
            ("trunk_g2_0.b", false, $($r)+ $p.trunk_g2_0.b),
            ("trunk_g2_1.w", false, $($r)+ $p.trunk_g2_1.w),
            ("trunk_g2_1.b", false, $($r)+ $p.trunk_g2_1.b),
            ("head_g1_0.w", true, $($r)+ $p.head_g1_0.w),
            ("head_g1_0.b", true, $($r)+ $p.head_g1_0.b),
            ("head_g1_1.w", true, $($r)+ $p.head_g1_1.w),
            ("head_g1_1.b", true, $($r)+ $p.head_g1_1.b),
            ("head_g2_0.w", true, $($r)+ $p.head_g2_0.w),
            ("head_g2_0.b", true, $($r)+ $p.head_g2_0.b),
            ("head_g2_1.w", true, $($r)+ $p.head_g2_1.w),
            ("head_g2_1.b", true, $($r)+ $p.head_g2_1.b),
        ]
    };
}

impl UcmParams {
    /// All-zero parameters.
    pub fn zeros(cfg: &UcmConfig) -> Self {
        let c = cfg.channels;
        let h = cfg.hidden_width();
        let k = cube_offsets(cfg.kernel_radius);
        Self {
            cfg: cfg.clone(),
            code_emb: Embedding::zeros(256, c),
            prior_a: SparseConvKernel::zeros(k.clone(), c, c),
            prior_b: SparseConvKernel::zeros(k.clone(), c, c),
            offset_emb: Embedding::zeros(8, c),
            target: SparseConvKernel::zeros(k, c, c),
            prior_code_emb: Embedding::zeros(256, c),
            agg: SparseConvKernel::zeros(cube_offsets(cfg.neighborhood_radius), c, c),
            fuse: DenseLayer::zeros(2 * c, c),
            nibble_emb_g1: Embedding::zeros(16, c),
            nibble_emb_g2: Embedding::zeros(16, c),
            trunk_g1_0: DenseLayer::zeros(c, h),
            trunk_g1_1: DenseLayer::zeros(c, h),
            trunk_g2_0: DenseLayer::zeros(c, h),
            trunk_g2_1: DenseLayer::zeros(c, h),
            head_g1_0: DenseLayer::zeros(h, cfg.low_classes()),
            head_g1_1: DenseLayer::zeros(h, 16),
            head_g2_0: DenseLayer::zeros(h, cfg.low_classes()),
            head_g2_1: DenseLayer::zeros(h, 16),
        }
    }

    /// Seeded random initialization.
    pub fn init(cfg: &UcmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let h = cfg.hidden_width();
        let k = cube_offsets(cfg.kernel_radius);
        let relu_gain = std::f32::consts::SQRT_2;
        Self {
            cfg: cfg.clone(),
            code_emb: Embedding::init(256, c, 0.5, &mut rng),
            prior_a: SparseConvKernel::init(k.clone(), c, c, 1.0, &mut rng),
            prior_b: SparseConvKernel::init(k.clone(), c, c, 1.0, &mut rng),
            offset_emb: Embedding::init(8, c, 0.5, &mut rng),
            target: SparseConvKernel::init(k, c, c, 1.0, &mut rng),
            prior_code_emb: Embedding::init(256, c, 0.5, &mut rng),
            agg: SparseConvKernel::init(cube_offsets(cfg.neighborhood_radius), c, c, 1.0, &mut rng),
            fuse: DenseLayer::init(2 * c, c, 1.0, &mut rng),
            nibble_emb_g1: Embedding::init(16, c, 0.5, &mut rng),
            nibble_emb_g2: Embedding::init(16, c, 0.5, &mut rng),
            trunk_g1_0: DenseLayer::init(c, h, relu_gain, &mut rng),
            trunk_g1_1: DenseLayer::init(c, h, relu_gain, &mut rng),
            trunk_g2_0: DenseLayer::init(c, h, relu_gain, &mut rng),
            trunk_g2_1: DenseLayer::init(c, h, relu_gain, &mut rng),
            head_g1_0: DenseLayer::init(h, cfg.low_classes(), 0.5, &mut rng),
            head_g1_1: DenseLayer::init(h, 16, 0.5, &mut rng),
            head_g2_0: DenseLayer::init(h, cfg.low_classes(), 0.5, &mut rng),
            head_g2_1: DenseLayer::init(h, 16, 0.5, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.cfg)
    }

    pub fn trunk(&self, h: Head) -> &DenseLayer {
        match h {
            Head::G1Low => &self.trunk_g1_0,
            Head::G1High => &self.trunk_g1_1,
            Head::G2Low => &self.trunk_g2_0,
            Head::G2High => &self.trunk_g2_1,
        }
    }

    pub fn trunk_mut(&mut self, h: Head) -> &mut DenseLayer {
        match h {
            Head::G1Low => &mut self.trunk_g1_0,
            Head::G1High => &mut self.trunk_g1_1,
            Head::G2Low => &mut self.trunk_g2_0,
            Head::G2High => &mut self.trunk_g2_1,
        }
    }

    pub fn head(&self, h: Head) -> &DenseLayer {
        match h {
            Head::G1Low => &self.head_g1_0,
            Head::G1High => &self.head_g1_1,
            Head::G2Low => &self.head_g2_0,
            Head::G2High => &self.head_g2_1,
        }
    }

    pub fn head_mut(&mut self, h: Head) -> &mut DenseLayer {
        match h {
            Head::G1Low => &mut self.head_g1_0,
            Head::G1High => &mut self.head_g1_1,
            Head::G2Low => &mut self.head_g2_0,
            Head::G2High => &mut self.head_g2_1,
        }
    }

    /// `(name, tunable, tensor)` in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, bool, &Tensor)> {
        let p = self;
        param_list!(p; &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, bool, &mut Tensor)> {
        let p = self;
        param_list!(p; &mut)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn tunable_count(&self) -> usize {
        self.tensors().iter().filter(|(_, tun, _)| *tun).map(|(_, _, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &UcmParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.all_finite())
    }

    /// Checkpoint bytes: tensor manifest with the config as metadata.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        write_tensors(meta, &self.tensors())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, records) = read_tensors(bytes)?;
        let cfg: UcmConfig = serde_json::from_value(meta).map_err(|e| Error::ParseError(format!("checkpoint config: {e}")))?;
        let mut params = Self::zeros(&cfg);
        {
            let slots = params.tensors_mut();
            if slots.len() != records.len() {
                return Err(Error::ParseError(format!(
                    "checkpoint has {} tensors, expected {}",
                    records.len(),
                    slots.len()
                )));
            }
            for ((name, tunable, slot), rec) in slots.into_iter().zip(records) {
                if rec.name != name || rec.tunable != tunable || rec.tensor.shape != slot.shape {
                    return Err(Error::ParseError(format!("checkpoint entry {} does not match {name}", rec.name)));
                }
                *slot = rec.tensor;
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// 64-bit identifier of the checkpoint bytes.
    pub fn model_id(&self) -> u64 {
        model_id_of(&self.to_bytes())
    }
}

pub fn model_id_of(checkpoint: &[u8]) -> u64 {
    let digest = Sha256::digest(checkpoint);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_labels_parse_back() {
        for v in Variant::all() {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::FULL);
        assert!("SC+XY".parse::<Variant>().is_err());
    }

    #[test]
    fn partition_is_exact_and_disjoint() {
        let p = UcmParams::init(&UcmConfig::with_channels(8), 1);
        let names: Vec<_> = p.tensors().iter().map(|(n, _, _)| *n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let tunable: Vec<_> = p.tensors().into_iter().filter(|t| t.1).map(|t| t.0).collect();
        assert_eq!(tunable.len(), 8);
        assert!(tunable.iter().all(|n| n.starts_with("head_")));
        assert_eq!(p.tunable_count(), 4 * (8 * 16 + 16));
    }

    #[test]
    fn hidden_width_sizes_trunks_and_heads() {
        let cfg = UcmConfig {
            hidden: 20,
            ..UcmConfig::with_channels(8)
        };
        let p = UcmParams::init(&cfg, 1);
        assert_eq!(p.tunable_count(), 4 * (20 * 16 + 16));
        assert_eq!((p.trunk(Head::G2High).input_dim(), p.trunk(Head::G2High).output_dim()), (8, 20));
        let q = UcmParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(q.cfg.hidden_width(), 20);
        assert_eq!(UcmConfig::with_channels(8).hidden_width(), 8);
    }

    #[test]
    fn checkpoint_roundtrip_and_id() {
        let p = UcmParams::init(&UcmConfig::with_channels(4), 3);
        let bytes = p.to_bytes();
        let q = UcmParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.model_id(), q.model_id());
        let other = UcmParams::init(&UcmConfig::with_channels(4), 4);
        assert_ne!(p.model_id(), other.model_id());
        assert!(UcmParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn default_is_sixty_four_channels_and_variants_enumerate() {
        assert_eq!(UcmConfig::default().channels, 64);
        let all = Variant::all();
        assert_eq!(all[0], Variant::BASELINE);
        assert_eq!(all[7], Variant::FULL);
        assert_eq!(all[7].label(), "SC+SG+CG");
    }
}
