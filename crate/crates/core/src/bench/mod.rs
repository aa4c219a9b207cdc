//! Corpus synthesis, metrics, benchmark and ablation drivers, reports.

mod corpus;
mod metrics;
mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::{synth_corpus, synth_instance, CorpusKind, CorpusSpec};
pub use metrics::{cr_gain, d1_psnr, psnr_from_mse, raw_code_bpp, PSNR_CAP};
pub use report::{rd_monotone_pairs, rd_points, ConfigSummary, EvalReport, EvalRow, RdPoint, PSNR_CONVENTION};

use crate::codec::{decode_full, encode_with_report, BitstreamContainer, CodecConfig};
use crate::geometry::{build_pyramid, PointCloud};
use crate::ucm::{train_ucm, TrainConfig, UcmParams, Variant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCorpus {
    pub name: String,
    pub clouds: Vec<PointCloud>,
}

impl NamedCorpus {
    pub fn synth(spec: &CorpusSpec) -> Result<Self> {
        Ok(Self {
            name: spec.kind.name().to_string(),
            clouds: synth_corpus(spec)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig<'a> {
    pub label: String,
    pub params: &'a UcmParams,
    pub codec: CodecConfig,
}

/// Reference for CR-Gain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// Every occupancy code sent as a raw byte.
    RawCodes,
    /// Another config of the same run, by label.
    Config(String),
}

impl Anchor {
    fn describe(&self) -> String {
        match self {
            Anchor::RawCodes => "raw 8-bit occupancy codes".into(),
            Anchor::Config(l) => format!("config '{l}'"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BenchOptions {
    /// Record wall-clock times; off keeps reports byte-identical across runs.
    pub timings: bool,
}

/// Encodes, decodes and verifies one cloud, returning its report row with
/// the CR-Gain still relative to the raw-code anchor.
pub fn evaluate_instance(id: &str, corpus: &str, pc: &PointCloud, cfg: &BenchConfig<'_>, opts: BenchOptions) -> Result<EvalRow> {
    let t0 = Instant::now();
    let (c, rep) = encode_with_report(pc, cfg.params, &cfg.codec)?;
    let encode_ms = t0.elapsed().as_secs_f64() * 1e3;
    let bytes = c.to_bytes();
    let t1 = Instant::now();
    let decoded = decode_full(&BitstreamContainer::parse(&bytes)?, cfg.params)?;
    let decode_ms = t1.elapsed().as_secs_f64() * 1e3;

    let fail = |what: &str| Error::InvariantViolation(format!("{what} on instance {id} ({})", cfg.label));
    let geometry_bits = c.geometry.len() as f64 * 8.0;
    if geometry_bits > rep.ideal_geometry_bits + 64.0 * rep.geometry_streams as f64 {
        return Err(fail("coded size exceeds the ideal-length bound"));
    }
    let pyr = build_pyramid(pc);
    if decoded.levels[..] != pyr.levels[..usize::from(c.s_loss)] {
        return Err(fail("coded levels do not roundtrip"));
    }
    let psnr = if c.is_lossy() {
        if decoded.cloud.len() != pc.len() {
            return Err(fail("lossy decode has the wrong point count"));
        }
        d1_psnr(pc, &decoded.cloud, pc.depth())?
    } else {
        if decoded.cloud != *pc {
            return Err(fail("lossless roundtrip failed"));
        }
        PSNR_CAP
    };
    let split = c.rate_split();
    let bpp = split.total_bits() as f64 / pc.len() as f64;
    let anchor_bpp = raw_code_bpp(pc);
    Ok(EvalRow {
        instance: id.to_string(),
        corpus: corpus.to_string(),
        config: cfg.label.clone(),
        depth: pc.depth(),
        s_loss: c.s_loss,
        points: pc.len(),
        total_bits: split.total_bits(),
        weight_bits: split.weight_bits,
        geometry_bits: split.geometry_bits,
        header_bits: split.header_bits,
        ideal_geometry_bits: rep.ideal_geometry_bits,
        bpp,
        anchor_bpp,
        cr_gain: cr_gain(bpp, anchor_bpp)?,
        psnr,
        iaft_accepted: rep.iaft.map(|o| o.accepted),
        encode_ms: opts.timings.then_some(encode_ms),
        decode_ms: opts.timings.then_some(decode_ms),
    })
}

/// Every config on every instance. Rows are ordered by corpus, instance,
/// then config, independent of scheduling. Any failed verification aborts
/// the run with the instance id.
pub fn run_benchmark(corpora: &[NamedCorpus], configs: &[BenchConfig<'_>], anchor: &Anchor, opts: BenchOptions) -> Result<EvalReport> {
    if let Anchor::Config(label) = anchor {
        if !configs.iter().any(|c| &c.label == label) {
            return Err(Error::ConfigError(format!("anchor config '{label}' is not among the configs")));
        }
    }
    let mut jobs = Vec::new();
    for corpus in corpora {
        for (i, pc) in corpus.clouds.iter().enumerate() {
            for cfg in configs {
                jobs.push((format!("{}/{i:03}", corpus.name), corpus.name.as_str(), pc, cfg));
            }
        }
    }
    let mut rows = jobs
        .par_iter()
        .map(|(id, corpus, pc, cfg)| evaluate_instance(id, corpus, pc, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    if let Anchor::Config(label) = anchor {
        let anchors: Vec<(String, f64)> = rows
            .iter()
            .filter(|r| &r.config == label)
            .map(|r| (r.instance.clone(), r.bpp))
            .collect();
        for r in &mut rows {
            let a = anchors
                .iter()
                .find(|(i, _)| *i == r.instance)
                .map(|&(_, b)| b)
                .expect("anchor row per instance");
            r.anchor_bpp = a;
            r.cr_gain = cr_gain(r.bpp, a)?;
        }
    }
    Ok(EvalReport {
        anchor: anchor.describe(),
        psnr_convention: PSNR_CONVENTION.to_string(),
        rows,
    })
}

/// One lossy config per `s_loss` value (values at or above a cloud's depth
/// are lossless).
pub fn sweep_configs<'a>(params: &'a UcmParams, s_values: &[u8]) -> Vec<BenchConfig<'a>> {
    s_values
        .iter()
        .map(|&s| BenchConfig {
            label: format!("s_loss={s}"),
            params,
            codec: CodecConfig::lossy(s),
        })
        .collect()
}

/// Clamps each `s_loss` to the cloud depth; the container stores the
/// clamped value.
pub fn rd_sweep(clouds: &[PointCloud], params: &UcmParams, s_values: &[u8]) -> Result<Vec<RdPoint>> {
    let corpus = NamedCorpus {
        name: "rd".into(),
        clouds: clouds.to_vec(),
    };
    let mut rows = Vec::new();
    for (i, pc) in clouds.iter().enumerate() {
        for &s in s_values {
            let cfg = BenchConfig {
                label: format!("s_loss={s}"),
                params,
                codec: CodecConfig::lossy(s.min(pc.depth())),
            };
            rows.push(evaluate_instance(
                &format!("{}/{i:03}", corpus.name),
                &corpus.name,
                pc,
                &cfg,
                BenchOptions::default(),
            )?);
        }
    }
    Ok(rd_points(&EvalReport {
        anchor: Anchor::RawCodes.describe(),
        psnr_convention: PSNR_CONVENTION.to_string(),
        rows,
    }))
}

/// Aggregate lossless bpp (total bits over total points), verifying every
/// roundtrip.
pub fn corpus_bpp(clouds: &[PointCloud], params: &UcmParams) -> Result<f64> {
    let cfg = BenchConfig {
        label: "lossless".into(),
        params,
        codec: CodecConfig::lossless(),
    };
    let rows = clouds
        .par_iter()
        .enumerate()
        .map(|(i, pc)| evaluate_instance(&format!("heldout/{i:03}"), "heldout", pc, &cfg, BenchOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let bits: u64 = rows.iter().map(|r| r.total_bits).sum();
    let points: usize = rows.iter().map(|r| r.points).sum();
    Ok(bits as f64 / points as f64)
}

/// Raw-code baseline over a set of clouds (total bits over total points).
pub fn corpus_raw_bpp(clouds: &[PointCloud]) -> f64 {
    let bits: f64 = clouds.iter().map(|pc| raw_code_bpp(pc) * pc.len() as f64).sum();
    let points: usize = clouds.iter().map(PointCloud::len).sum();
    bits / points as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub param_count: usize,
    pub final_train_bits_per_code: f64,
    pub bpp: f64,
    /// Relative to the variant with every component off.
    pub cr_gain_vs_baseline: f64,
}

/// Trains one model per on/off combination of SC, SG and CG with otherwise
/// identical settings and measures held-out lossless bpp.
pub fn ablation(train: &[PointCloud], test: &[PointCloud], base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in Variant::all() {
        let mut cfg = base.clone();
        cfg.ucm.variant = v;
        let (params, rep) = train_ucm(train, &cfg)?;
        rows.push(AblationRow {
            variant: v,
            label: v.label(),
            param_count: rep.param_count,
            final_train_bits_per_code: rep.final_loss().unwrap_or(f64::NAN),
            bpp: corpus_bpp(test, &params)?,
            cr_gain_vs_baseline: 0.0,
        });
    }
    let base_bpp = rows.iter().find(|r| r.variant == Variant::BASELINE).expect("baseline row").bpp;
    for r in &mut rows {
        r.cr_gain_vs_baseline = cr_gain(r.bpp, base_bpp)?;
    }
    Ok(rows)
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>11} {:>9} {:>9}\n",
        "variant", "params", "train_b/c", "bpp", "cr_gain%"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>8} {:>11.4} {:>9.4} {:>9.2}\n",
            r.label, r.param_count, r.final_train_bits_per_code, r.bpp, r.cr_gain_vs_baseline
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ucm::UcmConfig;

    fn small_corpora() -> Vec<NamedCorpus> {
        [CorpusKind::DenseSurface, CorpusKind::SparseLidar]
            .iter()
            .map(|&k| NamedCorpus::synth(&CorpusSpec::new(k, 1, 2, 1500, 6)).unwrap())
            .collect()
    }

    #[test]
    fn report_shape_and_determinism() {
        let p = UcmParams::init(&UcmConfig::with_channels(4), 1);
        let corpora = small_corpora();
        let configs = vec![
            BenchConfig {
                label: "lossless".into(),
                params: &p,
                codec: CodecConfig::lossless(),
            },
            BenchConfig {
                label: "lossy4".into(),
                params: &p,
                codec: CodecConfig::lossy(4),
            },
        ];
        let a = run_benchmark(&corpora, &configs, &Anchor::RawCodes, BenchOptions::default()).unwrap();
        assert_eq!(a.rows.len(), 4 * 2);
        let b = run_benchmark(&corpora, &configs, &Anchor::RawCodes, BenchOptions::default()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.to_json(), b.to_json());
        for r in &a.rows {
            assert!(r.anchor_bpp > 0.0 && r.cr_gain.is_finite());
            assert_eq!(r.total_bits, r.weight_bits + r.geometry_bits + r.header_bits);
        }
        let rel = run_benchmark(&corpora, &configs, &Anchor::Config("lossless".into()), BenchOptions::default()).unwrap();
        assert!(rel.rows.iter().filter(|r| r.config == "lossless").all(|r| r.cr_gain == 0.0));
        assert!(run_benchmark(&corpora, &configs, &Anchor::Config("nope".into()), BenchOptions::default()).is_err());
        let timed = run_benchmark(&corpora, &configs[..1], &Anchor::RawCodes, BenchOptions { timings: true }).unwrap();
        assert!(timed.rows.iter().all(|r| r.encode_ms.is_some()));
    }

    #[test]
    fn sweep_gives_one_point_per_value() {
        let p = UcmParams::init(&UcmConfig::with_channels(4), 2);
        let clouds = synth_corpus(&CorpusSpec::new(CorpusKind::DenseSurface, 4, 2, 2000, 7)).unwrap();
        let pts = rd_sweep(&clouds, &p, &[4, 5, 6, 7]).unwrap();
        assert_eq!(pts.len(), 8);
        assert!(pts.iter().filter(|q| q.s_loss == 7).all(|q| q.psnr == PSNR_CAP));
        let configs = sweep_configs(&p, &[4, 5]);
        assert_eq!(configs.len(), 2);
    }
}
