use super::{key, Coord, PointCloud};
use crate::{Error, Result};

/// Occupied voxels of one scale together with their child occupancy codes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OccupancyLevel {
    pub scale: u8,
    pub coords: Vec<Coord>,
    pub codes: Vec<u8>,
}

impl OccupancyLevel {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Voxels of the next finer scale.
    pub fn children(&self) -> Result<Vec<Coord>> {
        o2v(&self.coords, &self.codes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.codes.len() {
            return Err(Error::InvariantViolation(format!(
                "level {}: {} coords but {} codes",
                self.scale,
                self.coords.len(),
                self.codes.len()
            )));
        }
        if !super::is_strictly_sorted(&self.coords) {
            return Err(Error::InvariantViolation(format!(
                "level {}: coords not strictly Morton sorted",
                self.scale
            )));
        }
        if self.codes.contains(&0) {
            return Err(Error::InvariantViolation(format!("level {}: zero occupancy code", self.scale)));
        }
        Ok(())
    }
}

/// Coarse-to-fine occupancy pyramid; `levels[l]` holds scale-`l` voxels, so
/// `levels[0]` is the single root and the children of `levels[depth - 1]`
/// are the points themselves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelPyramid {
    pub levels: Vec<OccupancyLevel>,
    pub depth: u8,
}

impl VoxelPyramid {
    /// Expands the finest level back into points.
    pub fn points(&self) -> Result<Vec<Coord>> {
        self.levels
            .last()
            .ok_or_else(|| Error::InvariantViolation("empty pyramid".into()))?
            .children()
    }

    /// Number of occupancy codes across all levels.
    pub fn code_count(&self) -> usize {
        self.levels.iter().map(OccupancyLevel::len).sum()
    }
}

pub fn build_pyramid(pc: &PointCloud) -> VoxelPyramid {
    let depth = pc.depth();
    let mut levels = Vec::with_capacity(depth as usize);
    let mut current = pc.points().to_vec();
    for scale in (0..depth).rev() {
        let (parents, codes) = v2o(&current).expect("point cloud invariants guarantee sorted input");
        current = parents.clone();
        levels.push(OccupancyLevel {
            scale,
            coords: parents,
            codes,
        });
    }
    levels.reverse();
    VoxelPyramid { levels, depth }
}

#[inline]
pub(crate) fn child_bit(c: Coord) -> u8 {
    (((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)) as u8
}

#[inline]
pub(crate) fn parent_of(c: Coord) -> Coord {
    [c[0] >> 1, c[1] >> 1, c[2] >> 1]
}

#[inline]
pub(crate) fn child_at(p: Coord, bit: u8) -> Coord {
    let b = u32::from(bit);
    [2 * p[0] + (b >> 2), 2 * p[1] + ((b >> 1) & 1), 2 * p[2] + (b & 1)]
}

/// Groups Morton-sorted children into parents and 8-bit occupancy codes.
pub fn v2o(children: &[Coord]) -> Result<(Vec<Coord>, Vec<u8>)> {
    let mut parents: Vec<Coord> = Vec::new();
    let mut codes: Vec<u8> = Vec::new();
    let mut prev: Option<u64> = None;
    for &c in children {
        let k = key(c);
        if prev.is_some_and(|p| p >= k) {
            return Err(Error::InvariantViolation("v2o input must be strictly Morton sorted".into()));
        }
        prev = Some(k);
        let p = parent_of(c);
        let bit = 1u8 << child_bit(c);
        match parents.last() {
            Some(&last) if last == p => *codes.last_mut().unwrap() |= bit,
            _ => {
                parents.push(p);
                codes.push(bit);
            }
        }
    }
    Ok((parents, codes))
}

/// Expands parents and their codes into Morton-sorted children.
pub fn o2v(parents: &[Coord], codes: &[u8]) -> Result<Vec<Coord>> {
    if parents.len() != codes.len() {
        return Err(Error::InvariantViolation(format!(
            "o2v: {} parents but {} codes",
            parents.len(),
            codes.len()
        )));
    }
    let total: usize = codes.iter().map(|c| c.count_ones() as usize).sum();
    let mut out = Vec::with_capacity(total);
    for (&p, &code) in parents.iter().zip(codes) {
        if code == 0 {
            return Err(Error::InvariantViolation("occupancy code 0 on an occupied voxel".into()));
        }
        for bit in 0..8 {
            if code & (1 << bit) != 0 {
                out.push(child_at(p, bit));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{is_strictly_sorted, sort_dedup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn v2o_bit_convention() {
        assert_eq!(v2o(&[[0, 0, 0]]).unwrap(), (vec![[0, 0, 0]], vec![1]));
        assert_eq!(v2o(&[[1, 1, 1]]).unwrap(), (vec![[0, 0, 0]], vec![128]));
        assert_eq!(v2o(&[[0, 0, 1], [1, 0, 0]]).unwrap(), (vec![[0, 0, 0]], vec![18]));
    }

    #[test]
    fn v2o_rejects_unsorted_or_duplicate() {
        assert!(matches!(v2o(&[[1, 0, 0], [0, 0, 1]]), Err(Error::InvariantViolation(_))));
        assert!(matches!(v2o(&[[1, 0, 0], [1, 0, 0]]), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn o2v_examples() {
        let all = o2v(&[[0, 0, 0]], &[255]).unwrap();
        assert_eq!(all.len(), 8);
        assert!(is_strictly_sorted(&all));
        assert_eq!(o2v(&[[1, 2, 3]], &[1]).unwrap(), vec![[2, 4, 6]]);
        assert!(matches!(o2v(&[[0, 0, 0]], &[0]), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn codes_and_child_subsets_are_in_bijection() {
        let mut seen = BTreeSet::new();
        for code in 1u8..=255 {
            let children = o2v(&[[5, 6, 7]], &[code]).unwrap();
            assert_eq!(children.len(), code.count_ones() as usize);
            let (parents, codes) = v2o(&children).unwrap();
            assert_eq!(parents, vec![[5, 6, 7]]);
            assert_eq!(codes, vec![code]);
            assert!(seen.insert(children));
        }
        assert_eq!(seen.len(), 255);
    }

    #[test]
    fn degenerate_single_point() {
        let pc = PointCloud::from_voxels(vec![[0, 0, 0]], 2).unwrap();
        let pyr = build_pyramid(&pc);
        assert_eq!(pyr.levels.len(), 2);
        for level in &pyr.levels {
            assert_eq!(level.coords, vec![[0, 0, 0]]);
            assert_eq!(level.codes, vec![1]);
        }
    }

    #[test]
    fn full_block_is_code_255() {
        let pts = o2v(&[[0, 0, 0]], &[255]).unwrap();
        let pyr = build_pyramid(&PointCloud::from_voxels(pts, 1).unwrap());
        assert_eq!(pyr.levels[0].coords, vec![[0, 0, 0]]);
        assert_eq!(pyr.levels[0].codes, vec![255]);
    }

    #[test]
    fn random_cloud_roundtrips_through_every_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<Coord> = (0..50)
                .map(|_| [rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..64)])
                .collect();
            let pc = PointCloud::from_voxels(pts.clone(), 6).unwrap();
            let pyr = build_pyramid(&pc);
            assert_eq!(pyr.levels[0].coords, vec![[0, 0, 0]]);
            // brute force: scale-l set is the dedup of points >> (depth - l)
            for (l, level) in pyr.levels.iter().enumerate() {
                level.validate().unwrap();
                let shift = 6 - l as u32;
                let mut expect: Vec<Coord> = pts.iter().map(|p| [p[0] >> shift, p[1] >> shift, p[2] >> shift]).collect();
                sort_dedup(&mut expect);
                assert_eq!(level.coords, expect);
                let children = level.children().unwrap();
                match pyr.levels.get(l + 1) {
                    Some(next) => {
                        assert_eq!(children, next.coords);
                        assert!(level.len() <= next.len() && next.len() <= 8 * level.len());
                    }
                    None => assert_eq!(children, pc.points()),
                }
            }
        }
    }
}
