use std::collections::HashMap;

use crate::geometry::{build_pyramid, Coord, PointCloud};
use crate::{Error, Result};

/// Reported in place of an infinite PSNR (identical clouds).
pub const PSNR_CAP: f64 = 999.0;

/// Relative bpp change against an anchor, in percent. Negative is better.
pub fn cr_gain(bpp_method: f64, bpp_anchor: f64) -> Result<f64> {
    if !(bpp_anchor.is_finite() && bpp_anchor > 0.0) {
        return Err(Error::InvalidAnchor(bpp_anchor));
    }
    Ok((bpp_method - bpp_anchor) / bpp_anchor * 100.0)
}

/// Rate of sending every occupancy code as a raw byte.
pub fn raw_code_bpp(pc: &PointCloud) -> f64 {
    8.0 * build_pyramid(pc).code_count() as f64 / pc.len() as f64
}

/// Exact nearest-neighbour search over integer points, bucketed on a grid.
struct Grid<'a> {
    cell: i64,
    buckets: HashMap<[i64; 3], Vec<&'a Coord>>,
    span: i64,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Coord], side: u64) -> Self {
        // about n^(1/3) cells per axis
        let per_axis = (points.len() as f64).cbrt().max(1.0);
        let cell = ((side as f64 / per_axis).max(1.0) as u64).next_power_of_two() as i64;
        let mut buckets: HashMap<[i64; 3], Vec<&Coord>> = HashMap::new();
        for p in points {
            buckets.entry(p.map(|v| i64::from(v) / cell)).or_default().push(p);
        }
        Self {
            cell,
            buckets,
            span: (side as i64 + cell - 1) / cell,
        }
    }

    fn nearest_sq(&self, q: &Coord) -> u64 {
        let home = q.map(|v| i64::from(v) / self.cell);
        let mut best = u64::MAX;
        for r in 0..=self.span {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(b) = self.buckets.get(&[home[0] + dx, home[1] + dy, home[2] + dz]) else {
                            continue;
                        };
                        for p in b {
                            let d: u64 = (0..3).map(|a| u64::from(p[a].abs_diff(q[a])).pow(2)).sum();
                            best = best.min(d);
                        }
                    }
                }
            }
            // anything in ring r + 1 or beyond is at least r * cell + 1 away on some axis
            let reach = (r * self.cell + 1) as u64;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn one_way_mse(from: &[Coord], to: &Grid<'_>) -> f64 {
    from.iter().map(|p| to.nearest_sq(p) as f64).sum::<f64>() / from.len() as f64
}

/// Symmetric point-to-point PSNR with peak `3 (2^depth - 1)^2`, using the
/// larger of the two one-way mean squared errors.
pub fn d1_psnr(reference: &PointCloud, decoded: &PointCloud, depth: u8) -> Result<f64> {
    if reference.is_empty() || decoded.is_empty() {
        return Err(Error::InvalidInput("PSNR needs two non-empty clouds".into()));
    }
    let side = 1u64 << depth.max(reference.depth()).max(decoded.depth());
    let ga = Grid::new(reference.points(), side);
    let gb = Grid::new(decoded.points(), side);
    let mse = one_way_mse(reference.points(), &gb).max(one_way_mse(decoded.points(), &ga));
    Ok(psnr_from_mse(mse, depth))
}

pub fn psnr_from_mse(mse: f64, depth: u8) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    let top = ((1u64 << depth) - 1) as f64;
    10.0 * (3.0 * top * top / mse).log10()
}
