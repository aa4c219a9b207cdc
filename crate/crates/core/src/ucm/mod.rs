//! Context model predicting each scale's occupancy codes from the coarser
//! scale.
//!
//! Per level transition the model runs a shared backbone (code embedding,
//! two residual sparse-conv blocks, parent-copy upsampling with a child
//! offset embedding, one residual sparse-conv block at the finer scale),
//! splits the target voxels into a checkerboard (G1 even coordinate sum, G2
//! odd), and predicts every code as a low nibble followed by a high nibble
//! conditioned on the low one. G2 contexts are enriched with the decoded G1
//! codes of their neighbours. Coding order per level is G1-low, G1-high,
//! G2-low, G2-high, Morton order inside each stage.

mod forward;
mod params;
mod receptive;
mod train;

pub use forward::{predict_level, GroupContext, LevelModel, LevelPredictor, PredictionBundle};
pub use params::{model_id_of, Head, UcmConfig, UcmParams, Variant};
pub use receptive::{influence_sweep, InfluenceReport};
pub use train::{evaluate_bits, level_loss_and_grad, model_gradient_check, train_ucm, TrainConfig, TrainReport};

use crate::geometry::Coord;
use crate::{Error, Result};

/// Probabilities over the 16 values of a nibble.
pub type NibblePmf = [f32; 16];

/// `(o mod 16, o / 16)`.
#[inline]
pub fn split_code(o: u8) -> (u8, u8) {
    (o & 15, o >> 4)
}

#[inline]
pub fn merge_code(low: u8, high: u8) -> Result<u8> {
    if low > 15 || high > 15 {
        return Err(Error::InvalidInput(format!("nibble out of range: ({low}, {high})")));
    }
    if low == 0 && high == 0 {
        return Err(Error::InvariantViolation("occupancy code 0 on an occupied voxel".into()));
    }
    Ok(low | (high << 4))
}

/// Checkerboard split of a level's voxels (indices into its coordinate list).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct GroupPartition {
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
}

impl GroupPartition {
    pub fn len(&self) -> usize {
        self.g1.len() + self.g2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
pub fn is_g1(c: Coord) -> bool {
    (c[0] + c[1] + c[2]).is_multiple_of(2)
}

/// Even coordinate sum goes to G1, odd to G2.
pub fn partition_checkerboard(coords: &[Coord]) -> GroupPartition {
    let mut p = GroupPartition::default();
    for (i, &c) in coords.iter().enumerate() {
        if is_g1(c) {
            p.g1.push(i);
        } else {
            p.g2.push(i);
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{o2v, sort_dedup};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nibble_split() {
        assert_eq!(split_code(255), (15, 15));
        assert_eq!(split_code(1), (1, 0));
        assert_eq!(split_code(200), (8, 12));
        for o in 1..=255u8 {
            let (l, h) = split_code(o);
            assert_eq!(merge_code(l, h).unwrap(), o);
        }
        assert!(merge_code(0, 0).is_err());
        assert!(merge_code(16, 0).is_err());
    }

    #[test]
    fn parity_groups() {
        let p = partition_checkerboard(&[[0, 0, 0], [1, 0, 0], [1, 1, 0]]);
        assert_eq!(p.g1, vec![0, 2]);
        assert_eq!(p.g2, vec![1]);
        let block = o2v(&[[0, 0, 0]], &[255]).unwrap();
        let p = partition_checkerboard(&block);
        assert_eq!((p.g1.len(), p.g2.len()), (4, 4));
    }

    #[test]
    fn same_group_voxels_are_never_face_adjacent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut coords: Vec<Coord> = (0..300)
                .map(|_| [rng.random_range(0..10), rng.random_range(0..10), rng.random_range(0..10)])
                .collect();
            sort_dedup(&mut coords);
            let p = partition_checkerboard(&coords);
            assert_eq!(p.len(), coords.len());
            for group in [&p.g1, &p.g2] {
                for &a in group {
                    for &b in group {
                        let d: u32 = (0..3).map(|k| coords[a][k].abs_diff(coords[b][k])).sum();
                        assert_ne!(d, 1, "{:?} {:?}", coords[a], coords[b]);
                    }
                }
            }
        }
    }
}
