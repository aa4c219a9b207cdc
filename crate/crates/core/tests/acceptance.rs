//! Acceptance suite. Prints one PASS/FAIL line per criterion. A FAIL line
//! is a measured result, not a crash, so the process still exits 0 unless
//! `PCGC_ACCEPTANCE_STRICT` is set. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --release --test acceptance -- 5 6`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use pcgc::bench::{
    ablation, corpus_bpp, corpus_raw_bpp, cr_gain, rd_monotone_pairs, rd_sweep, synth_corpus, synth_instance, CorpusKind, CorpusSpec,
};
use pcgc::codec::{decode_bytes, encode, encode_with_report, CodecConfig};
use pcgc::geometry::{o2v, v2o, Coord, PointCloud};
use pcgc::iaft::IaftConfig;
use pcgc::tensor::gradcheck::check_operators;
use pcgc::ucm::{influence_sweep, train_ucm, TrainConfig, UcmConfig, UcmParams, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), pcgc::Error>;
type Criterion = (&'static str, fn() -> Check);

fn dense_train_cfg() -> TrainConfig {
    TrainConfig {
        ucm: UcmConfig::with_channels(16),
        steps: 100,
        batch: 2,
        lr: 1e-2,
        seed: 0,
    }
}

fn dense_train() -> Vec<PointCloud> {
    synth_corpus(&CorpusSpec::new(CorpusKind::DenseSurface, 1, 16, 20_000, 7)).unwrap()
}

fn dense_heldout() -> Vec<PointCloud> {
    synth_corpus(&CorpusSpec::new(CorpusKind::DenseSurface, 2, 6, 20_000, 7)).unwrap()
}

/// The tiny dense-trained model shared by most criteria.
fn dense_model() -> &'static (UcmParams, usize) {
    static M: OnceLock<(UcmParams, usize)> = OnceLock::new();
    M.get_or_init(|| {
        let (p, rep) = train_ucm(&dense_train(), &dense_train_cfg()).expect("training");
        (p, rep.param_count)
    })
}

fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize, depth: u8) -> PointCloud {
    let side = 1u32 << depth;
    let pts = (0..n).map(|_| [0; 3].map(|_: u32| rng.random_range(0..side))).collect();
    PointCloud::from_voxels(pts, depth).unwrap()
}

fn clustered_cloud(rng: &mut ChaCha8Rng, n: usize, depth: u8) -> PointCloud {
    let side = 1i64 << depth;
    let centers: Vec<[i64; 3]> = (0..rng.random_range(1..5))
        .map(|_| [0; 3].map(|_: i64| rng.random_range(0..side)))
        .collect();
    let spread = (side / 16).max(1);
    let pts = (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            c.map(|v| (v + rng.random_range(-spread..=spread)).clamp(0, side - 1) as u32)
        })
        .collect();
    PointCloud::from_voxels(pts, depth).unwrap()
}

/// Cloud `i` of the fuzz set: depth 4..=10, log-uniform 1..=50k samples,
/// cycling through every synthetic kind plus uniform and clustered noise.
fn fuzz_cloud(i: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022 + i as u64);
    let depth: u8 = rng.random_range(4..=10);
    let n = (rng.random_range(0.0..(50_000f64).ln()).exp() as usize).clamp(1, 50_000);
    let kinds = CorpusKind::ALL.len();
    match i % (kinds + 2) {
        k if k < kinds => synth_instance(&CorpusSpec::new(CorpusKind::ALL[k], i as u64, 1, n, depth), 0).unwrap(),
        k if k == kinds => uniform_cloud(&mut rng, n, depth),
        _ => clustered_cloud(&mut rng, n, depth),
    }
}

fn c1_lossless_roundtrip() -> Check {
    let (params, _) = dense_model();
    let t0 = Instant::now();
    let mut points = 0;
    let mut failures = Vec::new();
    for i in 0..500 {
        let pc = fuzz_cloud(i);
        points += pc.len();
        let bytes = encode(&pc, params, &CodecConfig::lossless())?.to_bytes();
        match decode_bytes(&bytes, params) {
            Ok(back) if back == pc => {}
            Ok(_) => failures.push(format!("{i}: mismatch")),
            Err(e) => failures.push(format!("{i}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 600.0;
    Ok((
        pass,
        format!(
            "500 clouds, {points} points, {} failures {:?}, {secs:.1} s",
            failures.len(),
            failures.first()
        ),
    ))
}

fn c2_coder_bound() -> Check {
    let (params, _) = dense_model();
    let mut worst = f64::NEG_INFINITY;
    let mut runs = 0;
    for i in 0..60 {
        let pc = fuzz_cloud(1000 + i);
        let depth = pc.depth();
        let mut configs = vec![CodecConfig::lossless(), CodecConfig::lossy(1 + (i as u8) % depth)];
        if i % 4 == 0 {
            configs.push(CodecConfig {
                iaft: Some(IaftConfig {
                    iterations: 20,
                    ..IaftConfig::default()
                }),
                ..CodecConfig::lossless()
            });
        }
        for cfg in configs {
            let (c, rep) = encode_with_report(&pc, params, &cfg)?;
            let slack = c.geometry.len() as f64 * 8.0 - (rep.ideal_geometry_bits + 64.0 * rep.geometry_streams as f64);
            worst = worst.max(slack);
            runs += 1;
        }
    }
    Ok((worst <= 0.0, format!("{runs} encodes, max(coded - bound) = {worst:.1} bits")))
}

fn c3_bijection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for code in 1..=255u8 {
        for _ in 0..4 {
            let parent: Coord = [0; 3].map(|_: u32| rng.random_range(0..1 << 9));
            let children = o2v(&[parent], &[code])?;
            if children.len() != code.count_ones() as usize || v2o(&children)? != (vec![parent], vec![code]) {
                bad += 1;
            }
        }
    }
    // whole levels in both directions
    for _ in 0..50 {
        let n = rng.random_range(1..3000);
        let pc = uniform_cloud(&mut rng, n, 8);
        let (parents, codes) = v2o(pc.points())?;
        if o2v(&parents, &codes)? != pc.points() || codes.contains(&0) {
            bad += 1;
        }
    }
    let zero_rejected = o2v(&[[0; 3]], &[0]).is_err();
    Ok((
        bad == 0 && zero_rejected,
        format!("255 codes x 4 parents + 50 levels, {bad} mismatches, code 0 rejected: {zero_rejected}"),
    ))
}

fn c4_influence() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 1..=2 {
        let r = influence_sweep(k, 40, 4)?;
        let want = (2 * (2 * k + 1)) as u32;
        pass &= r.mismatches == 0 && r.max_extent == want;
        parts.push(format!(
            "k={k}: {} probes, {} mismatches, extent {} (expect {want})",
            r.probes, r.mismatches, r.max_extent
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn c5_tiny_model() -> Check {
    let (params, count) = dense_model();
    let test = dense_heldout();
    let bpp = corpus_bpp(&test, params)?;
    let raw = corpus_raw_bpp(&test);
    let ratio = bpp / raw;
    Ok((
        *count <= 200_000 && ratio <= 0.75,
        format!("{count} params, bpp {bpp:.4} vs raw {raw:.4}, ratio {ratio:.3}"),
    ))
}

fn c6_iaft_ood() -> Check {
    let (params, _) = dense_model();
    let test = synth_corpus(&CorpusSpec::new(CorpusKind::SparseLidar, 6, 3, 150_000, 11))?;
    let cfg = CodecConfig {
        iaft: Some(IaftConfig::default()),
        ..CodecConfig::lossless()
    };
    let (mut plain, mut tuned, mut weights, mut saved) = (0usize, 0usize, 0usize, 0isize);
    for pc in &test {
        let base = encode(pc, params, &CodecConfig::lossless())?;
        let c = encode(pc, params, &cfg)?;
        let bytes = c.to_bytes();
        if decode_bytes(&bytes, params)? != *pc {
            return Ok((false, "IAFT stream does not roundtrip".into()));
        }
        plain += base.to_bytes().len();
        tuned += bytes.len();
        weights += c.weights.len();
        saved += base.geometry.len() as isize - c.geometry.len() as isize;
    }
    let gain = 100.0 * (1.0 - tuned as f64 / plain as f64);
    let share = if saved > 0 { weights as f64 / saved as f64 } else { f64::INFINITY };
    Ok((
        gain >= 2.0 && share < 0.25,
        format!(
            "total {plain} -> {tuned} bytes ({gain:.2}% smaller), weights {weights} B = {:.1}% of {saved} B geometry saved",
            100.0 * share
        ),
    ))
}

fn c7_zero_iters() -> Check {
    let (params, _) = dense_model();
    let mut same = 0;
    let mut total = 0;
    for i in 0..20 {
        let pc = fuzz_cloud(2000 + i);
        for s in [None, Some(pc.depth() / 2)] {
            let base = CodecConfig {
                s_loss: s,
                ..CodecConfig::default()
            };
            let zero = CodecConfig {
                iaft: Some(IaftConfig {
                    iterations: 0,
                    ..IaftConfig::default()
                }),
                ..base.clone()
            };
            total += 1;
            if encode(&pc, params, &base)?.to_bytes() == encode(&pc, params, &zero)?.to_bytes() {
                same += 1;
            }
        }
    }
    Ok((same == total, format!("{same}/{total} streams byte-identical")))
}

fn c8_ablation() -> Check {
    let train = synth_corpus(&CorpusSpec::new(CorpusKind::DenseSurface, 1, ABLATION_TRAIN, 20_000, 7))?;
    let test = dense_heldout();
    let cfg = TrainConfig {
        ucm: UcmConfig {
            hidden: ABLATION_HIDDEN,
            ..UcmConfig::with_channels(16)
        },
        steps: ABLATION_STEPS,
        ..dense_train_cfg()
    };
    let rows = ablation(&train, &test, &cfg)?;
    let bpp = |v: Variant| rows.iter().find(|r| r.variant == v).unwrap().bpp;
    let full = bpp(Variant::FULL);
    let base = bpp(Variant::BASELINE);
    let cg_only = bpp(Variant {
        channel_groups: true,
        ..Variant::BASELINE
    });
    let full_best = rows.iter().filter(|r| r.variant != Variant::FULL).all(|r| full < r.bpp);
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.label, r.bpp)).collect();
    Ok((full_best && cg_only >= base, table.join(", ")))
}

const ABLATION_TRAIN: usize = 64;
const ABLATION_STEPS: usize = 300;
const ABLATION_HIDDEN: usize = 64;

fn c9_rd_monotone() -> Check {
    let (params, _) = dense_model();
    let s_values = [3, 4, 5, 6, 7];
    let mut points = Vec::new();
    for seed in 0..20 {
        let pc = synth_instance(&CorpusSpec::new(CorpusKind::DenseSurface, 900 + seed, 1, 20_000, 8), 0)?;
        points.extend(rd_sweep(&[pc], params, &s_values)?.into_iter().map(|mut p| {
            p.instance = format!("seed{seed}");
            p
        }));
    }
    // rd_sweep verifies that every lossy decode has exactly k points
    let (good, total) = rd_monotone_pairs(&points);
    let frac = good as f64 / total as f64;
    Ok((
        frac >= 0.9,
        format!(
            "{} s_loss values, {good}/{total} adjacent pairs monotone ({:.1}%)",
            s_values.len(),
            100.0 * frac
        ),
    ))
}

fn c10_cr_gain() -> Check {
    let a = cr_gain(0.54, 0.76)?;
    let b = cr_gain(5.04, 5.32)?;
    let pass = (a - -28.95).abs() <= 0.01 && (b - -5.26).abs() <= 0.01;
    Ok((pass, format!("{a:.4}% and {b:.4}%")))
}

fn c11_operator_gradients() -> Check {
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for seed in 0..50 {
        for (name, err) in check_operators(seed) {
            n += 1;
            if err > worst.0 || err.is_nan() {
                worst = (err, format!("{name} seed {seed}"));
            }
        }
    }
    Ok((worst.0 < 1e-3, format!("{n} checks, max rel err {:.2e} ({})", worst.0, worst.1)))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("lossless roundtrip fuzz", c1_lossless_roundtrip),
        ("coder length bound", c2_coder_bound),
        ("V2O/O2V bijection", c3_bijection),
        ("influence reach", c4_influence),
        ("tiny model vs raw codes", c5_tiny_model),
        ("IAFT on out-of-distribution data", c6_iaft_ood),
        ("zero IAFT iterations", c7_zero_iters),
        ("SC/SG/CG ablation", c8_ablation),
        ("lossy RD monotonicity", c9_rd_monotone),
        ("CR-Gain", c10_cr_gain),
        ("operator gradients", c11_operator_gradients),
    ];
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{n}] {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{failed} criteria failed");
    if failed > 0 && std::env::var_os("PCGC_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
