//! `pcgc`: synthesize corpora, train the context model, encode, decode,
//! benchmark and inspect containers.
//!
//! Every subcommand accepts `--config FILE` with TOML `key = value` pairs
//! named like the long flags; flags given on the command line win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use pcgc::bench::{
    ablation, ablation_text, rd_points, run_benchmark, synth_corpus, synth_instance, Anchor, BenchConfig, BenchOptions, CorpusKind,
    CorpusSpec, EvalReport, NamedCorpus,
};
use pcgc::codec::{compute_bpp, decode_full, encode_with_report, BitstreamContainer, CodecConfig};
use pcgc::geometry::ply::{read_file, voxels_to_f64, write_file};
use pcgc::geometry::{voxelize, Bounds, PointCloud};
use pcgc::iaft::IaftConfig;
use pcgc::ucm::{train_ucm, TrainConfig, UcmConfig, UcmParams, Variant};

const MODEL_DIR_ENV: &str = "PCGC_MODEL_DIR";
const DEFAULT_MODEL: &str = "ucm.ckpt";

#[derive(Parser, Debug)]
#[command(name = "pcgc", version, about = "Learned point-cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic corpus as PLY files of voxel coordinates.
    Synth(SynthArgs),
    /// Train a context model on a synthetic corpus or a directory of PLYs.
    Train(TrainArgs),
    /// Compress one PLY file.
    Encode(EncodeArgs),
    /// Decompress a container back to PLY.
    Decode(DecodeArgs),
    /// Encode, decode, verify and measure over synthetic corpora.
    Bench(BenchArgs),
    /// Print a container's header and rate split.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Corpus kind(s), comma separated: dense, sparse, splat, noise, dropout, deform.
    #[arg(long, default_value = "dense", value_delimiter = ',')]
    kind: Vec<CorpusKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clouds per kind.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Surface samples per cloud before voxelization.
    #[arg(long, default_value_t = 20000)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    depth: u8,
}

impl CorpusArgs {
    fn specs(&self) -> Vec<CorpusSpec> {
        self.kind
            .iter()
            .map(|&k| CorpusSpec::new(k, self.seed, self.count, self.points, self.depth))
            .collect()
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Train on every .ply in this directory (voxelized at --depth) instead of synthesizing.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Hidden width of the per-stage MLPs; 0 uses --channels.
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    /// `full`, `baseline`, or components joined by `+` (SC, SG, CG).
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Checkpoint path (relative names go under $PCGC_MODEL_DIR when set).
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct IaftArgs {
    /// Fine-tuning iterations; 0 disables fine-tuning.
    #[arg(long, default_value_t = 0)]
    iaft_iters: usize,
    #[arg(long, default_value_t = 5e-3)]
    iaft_lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    iaft_lambda: f32,
    #[arg(long, default_value_t = 1.0 / 128.0)]
    iaft_step: f32,
    /// Penalize absolute head weights instead of deltas.
    #[arg(long)]
    iaft_l1_absolute: bool,
}

impl IaftArgs {
    fn config(&self) -> Option<IaftConfig> {
        (self.iaft_iters > 0).then(|| IaftConfig {
            iterations: self.iaft_iters,
            lr: self.iaft_lr,
            lambda_l1: self.iaft_lambda,
            step: self.iaft_step,
            l1_on_delta: !self.iaft_l1_absolute,
            ..IaftConfig::default()
        })
    }
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    depth: u8,
    /// Rescale the input into the cube instead of treating coordinates as voxel indices.
    #[arg(long)]
    fit: bool,
    /// First scale reconstructed by top-k; omit for lossless.
    #[arg(long)]
    s_loss: Option<u8>,
    #[command(flatten)]
    iaft: IaftArgs,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    iaft: IaftArgs,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: PathBuf,
    /// Lossy sweep, e.g. `s_loss=4..8` (inclusive); one RD point per value.
    #[arg(long)]
    sweep: Option<String>,
    /// Label of the config used as CR-Gain anchor; default is raw 8-bit codes.
    #[arg(long)]
    anchor: Option<String>,
    /// Instead of benchmarking one model, train all SC/SG/CG combinations
    /// on a dense corpus and compare them on the bench corpora.
    #[arg(long)]
    ablation: bool,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Hidden width of the per-stage MLPs; 0 uses --channels.
    #[arg(long, default_value_t = 0)]
    hidden: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    train_count: usize,
    #[arg(long)]
    timings: bool,
    /// Write the structured report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write rate-distortion points here.
    #[arg(long)]
    rd: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn model_path(p: &Path) -> PathBuf {
    match std::env::var_os(MODEL_DIR_ENV) {
        Some(dir) if p.is_relative() && !p.exists() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_model(p: &Path) -> Result<UcmParams> {
    let path = model_path(p);
    UcmParams::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    write_file(path, &voxels_to_f64(pc.points())).with_context(|| format!("writing {}", path.display()))
}

fn read_cloud(path: &Path, depth: u8, fit: bool) -> Result<PointCloud> {
    let pts = read_file(path).with_context(|| format!("reading {}", path.display()))?;
    let bounds = if fit {
        None
    } else {
        Some(Bounds {
            min: [0.0; 3],
            extent: ((1u64 << depth.min(63)) - 1) as f64,
        })
    };
    let pc = voxelize(&pts, depth, bounds).with_context(|| {
        format!(
            "voxelizing {} at depth {depth} (use --fit to rescale arbitrary coordinates)",
            path.display()
        )
    })?;
    Ok(pc)
}

fn synth(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    for spec in a.corpus.specs() {
        for i in 0..spec.instances {
            let pc = synth_instance(&spec, i)?;
            let path = a.out.join(format!("{}_{i:03}.ply", spec.kind));
            write_cloud(&path, &pc)?;
            println!("{} {} points", path.display(), pc.len());
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus: Vec<PointCloud> = match &a.input_dir {
        Some(dir) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
                .collect();
            files.sort();
            if files.is_empty() {
                bail!("no .ply files in {}", dir.display());
            }
            files.iter().map(|f| read_cloud(f, a.corpus.depth, true)).collect::<Result<_>>()?
        }
        None => {
            let mut all = Vec::new();
            for spec in a.corpus.specs() {
                all.extend(synth_corpus(&spec)?);
            }
            all
        }
    };
    let cfg = TrainConfig {
        ucm: UcmConfig {
            variant: a.variant,
            hidden: a.hidden,
            ..UcmConfig::with_channels(a.channels)
        },
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.train_seed,
    };
    let (params, rep) = train_ucm(&corpus, &cfg)?;
    let path = model_path(&a.model);
    params.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let first = rep.losses.first().copied().unwrap_or(f64::NAN);
    let last = rep.final_loss().unwrap_or(f64::NAN);
    println!("clouds {} params {} variant {}", corpus.len(), rep.param_count, a.variant.label());
    println!("bits/code first step {first:.4} last step {last:.4}");
    println!("checkpoint {} id {:016x}", path.display(), params.model_id());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let pc = read_cloud(&a.input, a.depth, a.fit)?;
    let cfg = CodecConfig {
        s_loss: a.s_loss,
        iaft: a.iaft.config(),
        model_id: None,
    };
    let (c, rep) = encode_with_report(&pc, &params, &cfg)?;
    let bytes = c.to_bytes();
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let split = c.rate_split();
    println!(
        "points {} depth {} s_loss {}{}",
        pc.len(),
        c.depth,
        c.s_loss,
        if c.is_lossy() { " (lossy)" } else { "" }
    );
    println!(
        "bits total {} weights {} geometry {} header {}",
        split.total_bits(),
        split.weight_bits,
        split.geometry_bits,
        split.header_bits
    );
    println!("bpp {:.4}", compute_bpp(&c, pc.len()));
    if let Some(o) = rep.iaft {
        println!(
            "iaft {} geometry bytes untuned {} tuned {} weight bytes {} nonzero deltas {}",
            if o.accepted { "accepted" } else { "fallback" },
            o.untuned_geometry_bytes,
            o.tuned_geometry_bytes,
            o.weight_bytes,
            o.nonzero_deltas
        );
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let c = BitstreamContainer::parse(&bytes)?;
    let d = decode_full(&c, &params)?;
    write_cloud(&a.out, &d.cloud)?;
    println!("points {} depth {}", d.cloud.len(), d.cloud.depth());
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Vec<u8>> {
    let range = s.strip_prefix("s_loss=").context("sweep must look like s_loss=A..B")?;
    let (lo, hi) = range.split_once("..").context("sweep must look like s_loss=A..B")?;
    let (lo, hi): (u8, u8) = (lo.trim().parse()?, hi.trim().trim_start_matches('=').parse()?);
    if lo > hi {
        bail!("empty sweep range {lo}..{hi}");
    }
    Ok((lo..=hi).collect())
}

fn bench(a: BenchArgs) -> Result<()> {
    let corpora = a.corpus.specs().iter().map(NamedCorpus::synth).collect::<pcgc::Result<Vec<_>>>()?;
    let text = if a.ablation {
        let train_spec = CorpusSpec::new(
            CorpusKind::DenseSurface,
            a.corpus.seed ^ 0x5eed,
            a.train_count,
            a.corpus.points,
            a.corpus.depth,
        );
        let train = synth_corpus(&train_spec)?;
        let test: Vec<PointCloud> = corpora.iter().flat_map(|c| c.clouds.iter().cloned()).collect();
        let cfg = TrainConfig {
            ucm: UcmConfig {
                hidden: a.hidden,
                ..UcmConfig::with_channels(a.channels)
            },
            steps: a.steps,
            batch: 2,
            lr: 1e-2,
            seed: a.corpus.seed,
        };
        let rows = ablation(&train, &test, &cfg)?;
        if let Some(p) = &a.json {
            fs::write(p, serde_json::to_string_pretty(&rows)?)?;
        }
        ablation_text(&rows)
    } else {
        let params = load_model(&a.model)?;
        let mut configs = vec![BenchConfig {
            label: "ucm".into(),
            params: &params,
            codec: CodecConfig::lossless(),
        }];
        if let Some(icfg) = a.iaft.config() {
            configs.push(BenchConfig {
                label: format!("ucm+iaft{}", icfg.iterations),
                params: &params,
                codec: CodecConfig {
                    iaft: Some(icfg),
                    ..CodecConfig::lossless()
                },
            });
        }
        if let Some(sw) = &a.sweep {
            for s in parse_sweep(sw)? {
                if s > a.corpus.depth {
                    bail!("s_loss {s} exceeds depth {}", a.corpus.depth);
                }
                configs.push(BenchConfig {
                    label: format!("s_loss={s}"),
                    params: &params,
                    codec: CodecConfig::lossy(s),
                });
            }
        }
        let anchor = a.anchor.clone().map_or(Anchor::RawCodes, Anchor::Config);
        let report = run_benchmark(&corpora, &configs, &anchor, BenchOptions { timings: a.timings })?;
        if let Some(p) = &a.json {
            fs::write(p, report.to_json())?;
        }
        if let Some(p) = &a.rd {
            let sweep_rows = EvalReport {
                rows: report.rows.iter().filter(|r| r.config.starts_with("s_loss=")).cloned().collect(),
                ..report.clone()
            };
            let pts = rd_points(&sweep_rows);
            fs::write(p, serde_json::to_string_pretty(&pts)?)?;
        }
        report.to_text()
    };
    print!("{text}");
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let c = BitstreamContainer::parse(&bytes)?;
    let split = c.rate_split();
    println!("depth {}", c.depth);
    println!("s_loss {}{}", c.s_loss, if c.is_lossy() { " (lossy)" } else { " (lossless)" });
    println!("iaft {} fallback {}", c.iaft, c.fallback);
    println!("model_id {:016x}", c.model_id);
    println!("points {}", c.point_count);
    if !c.counts.is_empty() {
        let counts: Vec<String> = c.counts.iter().map(u64::to_string).collect();
        println!("topk_counts {}", counts.join(" "));
    }
    println!("weight_bits {}", split.weight_bits);
    println!("geometry_bits {}", split.geometry_bits);
    println!("header_bits {}", split.header_bits);
    println!("total_bits {}", split.total_bits());
    println!("bpp {:.4}", compute_bpp(&c, c.point_count as usize));
    Ok(())
}

/// Pulls `--config FILE` out of `argv` and splices its pairs in right after
/// the subcommand, so explicit flags (later on the line) override them.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = if let Some(v) = argv[pos].strip_prefix("--config=") {
        let v = v.to_string();
        argv.remove(pos);
        v
    } else {
        if pos + 1 >= argv.len() {
            bail!("--config needs a file");
        }
        let v = argv.remove(pos + 1);
        argv.remove(pos);
        v
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {path}"))?;
    let mut injected = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => injected.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => injected.extend([flag, s]),
            toml::Value::Integer(i) => injected.extend([flag, i.to_string()]),
            toml::Value::Float(f) => injected.extend([flag, f.to_string()]),
            toml::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                injected.extend([flag, parts.join(",")]);
            }
            other => bail!("config key {key}: unsupported value {other}"),
        }
    }
    let sub = argv.iter().skip(1).position(|a| !a.starts_with('-')).map_or(argv.len(), |i| i + 2);
    argv.splice(sub..sub, injected);
    Ok(argv)
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cmd = Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true));
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Encode(a) => encode(a),
        Cmd::Decode(a) => decode(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_ranges_are_inclusive() {
        assert_eq!(parse_sweep("s_loss=4..8").unwrap(), vec![4, 5, 6, 7, 8]);
        assert_eq!(parse_sweep("s_loss=3..=3").unwrap(), vec![3]);
        assert!(parse_sweep("s_loss=5..4").is_err());
        assert!(parse_sweep("depth=1..2").is_err());
    }

    #[test]
    fn config_pairs_land_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "steps = 7\ntimings = true\nfit = false\n").unwrap();
        let argv: Vec<String> = ["pcgc", "bench", "--config", path.to_str().unwrap(), "--steps", "9"]
            .map(String::from)
            .into();
        let out = expand_config(argv).unwrap();
        assert_eq!(out, ["pcgc", "bench", "--steps", "7", "--timings", "--steps", "9"]);
    }
}
