//! Influence sets of the backbone: which finer-scale context rows change
//! when one coarse-scale input changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::backbone_with;
use super::params::{UcmConfig, UcmParams};
use crate::geometry::{build_pyramid, parent_of, Coord, PointCloud};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InfluenceReport {
    pub probes: usize,
    /// Probes whose observed influence set differs from the predicted one.
    pub mismatches: usize,
    /// Largest observed per-axis extent of an influence set, in finer voxels.
    pub max_extent: u32,
}

fn cheb(a: Coord, b: Coord) -> u32 {
    (0..3).map(|i| a[i].abs_diff(b[i])).max().unwrap()
}

/// Perturbs single parent embeddings and compares the set of changed context
/// rows with the prediction: with one conv of reach `k` on the coarse grid
/// (second prior block and finer-scale conv zeroed) a parent `p` influences
/// exactly the children `c` with `|parent(c) - p|_inf <= k`, i.e. a window
/// `2(2k + 1)` voxels wide on the finer grid. Weights are made positive so
/// that no ReLU can mask a change.
pub fn influence_sweep(k: i32, probes: usize, seed: u64) -> Result<InfluenceReport> {
    let cfg = UcmConfig {
        channels: 3,
        kernel_radius: k,
        ..UcmConfig::default()
    };
    let mut params = UcmParams::init(&cfg, seed);
    for t in [&mut params.code_emb.table, &mut params.prior_a.w, &mut params.offset_emb.table] {
        t.data.iter_mut().for_each(|v| *v = v.abs() + 0.01);
    }
    params.prior_b.w.fill(0.0);
    params.prior_b.b.fill(0.0);
    params.target.w.fill(0.0);
    params.target.b.fill(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 4 * (2 * k as u32 + 3);
    let pts: Vec<Coord> = (0..side * side * side / 3)
        .map(|_| [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)])
        .collect();
    let depth = (32 - (side - 1).leading_zeros()) as u8;
    let pyr = build_pyramid(&PointCloud::from_voxels(pts, depth)?);
    let (parents, level) = (&pyr.levels[pyr.levels.len() - 2], &pyr.levels[pyr.levels.len() - 1]);
    let base = backbone_with(&params, parents, &level.coords, None)?;
    let delta = vec![0.5f32; cfg.channels];
    let mut report = InfluenceReport {
        probes: 0,
        mismatches: 0,
        max_extent: 0,
    };
    for _ in 0..probes {
        let pi = rng.random_range(0..parents.len());
        let p = parents.coords[pi];
        let bb = backbone_with(&params, parents, &level.coords, Some((pi, &delta)))?;
        let mut lo = [u32::MAX; 3];
        let mut hi = [0u32; 3];
        let mut mismatch = false;
        for (j, &c) in level.coords.iter().enumerate() {
            let changed = bb.f.row(j) != base.f.row(j);
            let predicted = cheb(parent_of(c), p) <= k as u32;
            mismatch |= changed != predicted;
            if changed {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        // extent only meaningful for probes away from the grid border
        let interior = (0..3).all(|a| p[a] >= k as u32 && p[a] + (k as u32) < (side / 2));
        if interior && lo[0] != u32::MAX {
            let full = (0..3).all(|a| hi[a] - lo[a] + 1 == 2 * (2 * k as u32 + 1));
            if full {
                report.max_extent = report.max_extent.max(hi[0] - lo[0] + 1);
            }
        }
        report.probes += 1;
        report.mismatches += usize::from(mismatch);
    }
    Ok(report)
}
