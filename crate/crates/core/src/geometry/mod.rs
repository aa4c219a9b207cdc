//! Point-cloud ingestion, voxelization and the occupancy-code pyramid.
//!
//! Child offset `(dx, dy, dz)` inside a 2x2x2 block owns bit `4dx + 2dy + dz`
//! of its parent's occupancy code, so the low nibble of a code is the `dx = 0`
//! half of the block.

mod morton;
pub mod ply;
mod pyramid;

pub(crate) use morton::key;
pub use morton::{is_strictly_sorted, morton_decode, morton_key, sort_dedup, MAX_DEPTH};
pub use pyramid::{build_pyramid, o2v, v2o, OccupancyLevel, VoxelPyramid};
pub(crate) use pyramid::{child_at, child_bit, parent_of};

use crate::{Error, Result};

/// Integer voxel coordinate.
pub type Coord = [u32; 3];

/// Deduplicated, Morton-sorted voxels inside a `2^depth` cube.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointCloud {
    points: Vec<Coord>,
    depth: u8,
}

impl PointCloud {
    /// Builds a cloud from integer voxels, sorting and deduplicating them.
    pub fn from_voxels(mut points: Vec<Coord>, depth: u8) -> Result<Self> {
        check_depth(depth)?;
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let limit = 1u64 << depth;
        if let Some(&v) = points.iter().flatten().find(|&&v| u64::from(v) >= limit) {
            return Err(Error::DepthTooSmall {
                value: f64::from(v),
                depth,
            });
        }
        sort_dedup(&mut points);
        Ok(Self { points, depth })
    }

    pub fn points(&self) -> &[Coord] {
        &self.points
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Coord> {
        self.points
    }
}

/// Axis-aligned cube used to map real coordinates onto the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub extent: f64,
}

impl Bounds {
    pub fn unit() -> Self {
        Self {
            min: [0.0; 3],
            extent: 1.0,
        }
    }

    /// Smallest cube anchored at the per-axis minimum that holds every point.
    pub fn enclosing(points: &[[f64; 3]]) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        Some(Self { min, extent })
    }
}

fn check_depth(depth: u8) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::InvalidInput(format!("depth {depth} outside 1..={MAX_DEPTH}")));
    }
    Ok(())
}

/// Quantizes real-valued points onto a `2^depth` grid.
///
/// Coordinates are mapped with scale `(2^depth - 1) / extent` relative to
/// `bounds` (the enclosing cube of the input when `None`) and rounded to the
/// nearest integer.
pub fn voxelize(points: &[[f64; 3]], depth: u8, bounds: Option<Bounds>) -> Result<PointCloud> {
    check_depth(depth)?;
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let bounds = match bounds {
        Some(b) => b,
        None => Bounds::enclosing(points).ok_or(Error::EmptyCloud)?,
    };
    let top = ((1u64 << depth) - 1) as f64;
    let scale = if bounds.extent > 0.0 { top / bounds.extent } else { 0.0 };
    let mut voxels = Vec::with_capacity(points.len());
    for p in points {
        let mut v = [0u32; 3];
        for a in 0..3 {
            let q = ((p[a] - bounds.min[a]) * scale).round();
            if !q.is_finite() || q < 0.0 || q > top {
                return Err(Error::DepthTooSmall { value: q, depth });
            }
            v[a] = q as u32;
        }
        voxels.push(v);
    }
    PointCloud::from_voxels(voxels, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_scaling() {
        let pc = voxelize(&[[0.4, 0.4, 0.4]], 3, Some(Bounds::unit())).unwrap();
        assert_eq!(pc.points(), &[[3, 3, 3]]);
    }

    #[test]
    fn duplicates_collapse() {
        let pc = voxelize(&[[0.2, 0.5, 0.9], [0.2, 0.5, 0.9]], 4, Some(Bounds::unit())).unwrap();
        assert_eq!(pc.len(), 1);
    }

    #[test]
    fn unit_cube_corners_fill_depth_one_grid() {
        let mut corners = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    corners.push([f64::from(x), f64::from(y), f64::from(z)]);
                }
            }
        }
        let pc = voxelize(&corners, 1, None).unwrap();
        assert_eq!(pc.len(), 8);
        assert!(is_strictly_sorted(pc.points()));
    }

    #[test]
    fn errors() {
        assert!(matches!(voxelize(&[], 4, None), Err(Error::EmptyCloud)));
        assert!(matches!(
            voxelize(&[[2.0, 0.0, 0.0]], 4, Some(Bounds::unit())),
            Err(Error::DepthTooSmall { .. })
        ));
        assert!(matches!(
            PointCloud::from_voxels(vec![[16, 0, 0]], 4),
            Err(Error::DepthTooSmall { .. })
        ));
        assert!(voxelize(&[[0.0; 3]], 0, None).is_err());
        assert!(voxelize(&[[0.0; 3]], 17, None).is_err());
    }
}
