use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{voxelize, Bounds, Coord, PointCloud};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    DenseSurface,
    SparseLidar,
    GaussianSplat,
    /// Dense surface with per-voxel jitter of up to 2 voxels.
    Noise,
    /// Dense surface with every voxel dropped with probability 1/2.
    Dropout,
    /// Dense surface warped by a smooth displacement field.
    Deform,
}

impl CorpusKind {
    pub const ALL: [CorpusKind; 6] = [
        CorpusKind::DenseSurface,
        CorpusKind::SparseLidar,
        CorpusKind::GaussianSplat,
        CorpusKind::Noise,
        CorpusKind::Dropout,
        CorpusKind::Deform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::DenseSurface => "dense-surface",
            CorpusKind::SparseLidar => "sparse-lidar",
            CorpusKind::GaussianSplat => "gaussian-splat",
            CorpusKind::Noise => "noise",
            CorpusKind::Dropout => "dropout",
            CorpusKind::Deform => "deform",
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let kind = match s.as_str() {
            "dense" | "dense-surface" => CorpusKind::DenseSurface,
            "sparse" | "lidar" | "sparse-lidar" => CorpusKind::SparseLidar,
            "splat" | "gaussian-splat" => CorpusKind::GaussianSplat,
            "ns" | "noise" => CorpusKind::Noise,
            "rs" | "dropout" => CorpusKind::Dropout,
            "cs" | "deform" => CorpusKind::Deform,
            _ => return Err(Error::InvalidInput(format!("unknown corpus kind '{s}'"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub seed: u64,
    /// Number of clouds.
    pub instances: usize,
    /// Samples drawn per cloud before voxelization.
    pub points: usize,
    pub depth: u8,
}

impl CorpusSpec {
    pub fn new(kind: CorpusKind, seed: u64, instances: usize, points: usize, depth: u8) -> Self {
        Self {
            kind,
            seed,
            instances,
            points,
            depth,
        }
    }
}

/// Cloud `i` of a corpus only depends on `(kind, seed, i, points, depth)`.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Vec<PointCloud>> {
    (0..spec.instances).map(|i| synth_instance(spec, i)).collect()
}

fn instance_rng(seed: u64, i: usize, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((i as u64) << 8 | salt);
    r
}

pub fn synth_instance(spec: &CorpusSpec, i: usize) -> Result<PointCloud> {
    if spec.points == 0 {
        return Err(Error::InvalidInput("corpus needs at least one point per cloud".into()));
    }
    let n = spec.points;
    let d = spec.depth;
    match spec.kind {
        CorpusKind::DenseSurface => voxelize(&surface_points(&mut instance_rng(spec.seed, i, 0), n), d, Some(Bounds::unit())),
        CorpusKind::SparseLidar => voxelize(&lidar_points(&mut instance_rng(spec.seed, i, 1), n), d, Some(Bounds::unit())),
        CorpusKind::GaussianSplat => voxelize(&splat_points(&mut instance_rng(spec.seed, i, 2), n), d, Some(Bounds::unit())),
        CorpusKind::Noise => {
            let dense = voxelize(&surface_points(&mut instance_rng(spec.seed, i, 0), n), d, Some(Bounds::unit()))?;
            let mut rng = instance_rng(spec.seed, i, 3);
            let top = (1u32 << d) - 1;
            let pts = dense
                .points()
                .iter()
                .map(|c| c.map(|v| v.saturating_add_signed(rng.random_range(-2..=2)).min(top)))
                .collect();
            PointCloud::from_voxels(pts, d)
        }
        CorpusKind::Dropout => {
            let dense = voxelize(&surface_points(&mut instance_rng(spec.seed, i, 0), n), d, Some(Bounds::unit()))?;
            let mut rng = instance_rng(spec.seed, i, 4);
            let mut kept: Vec<Coord> = dense.points().iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            if kept.is_empty() {
                kept.push(dense.points()[0]);
            }
            PointCloud::from_voxels(kept, d)
        }
        CorpusKind::Deform => {
            let mut pts = surface_points(&mut instance_rng(spec.seed, i, 0), n);
            warp(&mut instance_rng(spec.seed, i, 5), &mut pts);
            voxelize(&pts, d, Some(Bounds::unit()))
        }
    }
}

fn clamp01(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| v.clamp(0.0, 1.0))
}

/// Samples on a random smooth closed or open surface inside the unit cube.
fn surface_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let shape = rng.random_range(0..3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.01..0.06),
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let bump = |u: f64, v: f64| -> f64 { waves.iter().map(|&(a, fu, fv, ph)| a * (fu * u + fv * v + ph).sin()).sum() };
    let center = [
        rng.random_range(0.45..0.55),
        rng.random_range(0.45..0.55),
        rng.random_range(0.45..0.55),
    ];
    let radius = rng.random_range(0.25..0.35);
    (0..n)
        .map(|_| {
            let (u, v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let p = match shape {
                // height field
                0 => [0.05 + 0.9 * u, 0.05 + 0.9 * v, 0.5 + 2.5 * bump(TAU * u, TAU * v)],
                // bumpy sphere, area-uniform in (u, v)
                1 => {
                    let (th, z) = (TAU * u, 2.0 * v - 1.0);
                    let s = (1.0 - z * z).sqrt();
                    let r = radius * (1.0 + bump(th, z * 3.0));
                    [center[0] + r * s * th.cos(), center[1] + r * s * th.sin(), center[2] + r * z]
                }
                // torus
                _ => {
                    let (a, b) = (TAU * u, TAU * v);
                    let r = 0.12 * (1.0 + bump(a, b));
                    let big = radius + 0.05;
                    [
                        center[0] + (big + r * b.cos()) * a.cos(),
                        center[1] + (big + r * b.cos()) * a.sin(),
                        center[2] + r * b.sin(),
                    ]
                }
            };
            clamp01(p)
        })
        .collect()
}

/// Concentric rings around a sensor over a gently sloped ground, with
/// angular jitter and a few vertical walls that catch the beams.
fn lidar_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let rings = rng.random_range(16..33);
    let center = [rng.random_range(0.4..0.6), rng.random_range(0.4..0.6)];
    let slope = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let walls: Vec<(f64, f64, f64)> = (0..rng.random_range(2..6))
        .map(|_| (rng.random_range(0.0..TAU), rng.random_range(0.2..0.5), rng.random_range(0.2..0.8)))
        .collect();
    let per_ring = n.div_ceil(rings);
    let mut out = Vec::with_capacity(n);
    for j in 0..rings {
        let r = 0.03 * 1.12f64.powi(j as i32);
        for t in 0..per_ring {
            if out.len() == n {
                break;
            }
            let az = TAU * (t as f64 + rng.random_range(-0.3..0.3)) / per_ring as f64;
            let mut rr = r;
            let mut h = 0.0;
            for &(w_az, w_r, w_span) in &walls {
                let daz = (az - w_az).rem_euclid(TAU);
                if daz < w_span && r > w_r {
                    rr = w_r;
                    h = (r - w_r) * 0.5;
                }
            }
            let x = center[0] + rr * az.cos();
            let y = center[1] + rr * az.sin();
            let z = 0.3 + slope[0] * (x - 0.5) + slope[1] * (y - 0.5) + h;
            out.push(clamp01([x, y, z]));
        }
    }
    out
}

/// Mixture of anisotropic Gaussian blobs.
fn splat_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let k = rng.random_range(8..33);
    let blobs: Vec<([f64; 3], [f64; 3])> = (0..k)
        .map(|_| {
            let c = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let s = [
                rng.random_range(0.005..0.06),
                rng.random_range(0.005..0.06),
                rng.random_range(0.005..0.06),
            ];
            (c, s)
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    (0..n)
        .map(|_| {
            let (c, s) = blobs[rng.random_range(0..k)];
            clamp01([0, 1, 2].map(|a| c[a] + s[a] * unit.sample(rng)))
        })
        .collect()
}

/// Smooth sinusoidal displacement, amplitude up to 0.04 of the cube.
fn warp(rng: &mut ChaCha8Rng, pts: &mut [[f64; 3]]) {
    let params: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let dir = [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            ];
            (dir, rng.random_range(0.0..TAU), rng.random_range(0.01..0.04))
        })
        .collect();
    for p in pts.iter_mut() {
        let q = *p;
        for (a, &(dir, ph, amp)) in params.iter().enumerate() {
            let arg = dir[0] * q[0] + dir[1] * q[1] + dir[2] * q[2] + ph;
            p[a] = (q[a] + amp * arg.sin()).clamp(0.0, 1.0);
        }
    }
}
