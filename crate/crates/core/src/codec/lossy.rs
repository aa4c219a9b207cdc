use std::cmp::Ordering;

use crate::geometry::{child_bit, key, o2v, parent_of, Coord, OccupancyLevel};
use crate::ucm::{split_code, Head, LevelModel, NibblePmf, UcmParams};
use crate::{Error, Result};

/// Drops the mass on code 0 (an occupied voxel has at least one child) and
/// renormalizes. A table with all mass on 0 becomes uniform over 1..=255.
pub fn renormalize_nonzero(joint: &mut [f32; 256]) {
    joint[0] = 0.0;
    let s: f32 = joint.iter().sum();
    if s > 0.0 && s.is_finite() {
        joint.iter_mut().for_each(|v| *v /= s);
    } else {
        joint.iter_mut().skip(1).for_each(|v| *v = 1.0 / 255.0);
    }
}

/// `P(o) = P(low) P(high | low)` for one voxel, given the stage-0 table and
/// the stage-1 table for each of the 16 candidate low nibbles, with code 0
/// renormalized away.
pub fn joint_pmf(low: &NibblePmf, high_given_low: &[NibblePmf; 16]) -> [f32; 256] {
    let mut j = [0f32; 256];
    for (o, v) in j.iter_mut().enumerate() {
        let (l, h) = split_code(o as u8);
        *v = low[usize::from(l)] * high_given_low[usize::from(l)][usize::from(h)];
    }
    renormalize_nonzero(&mut j);
    j
}

/// `P(child b occupied)` for each of the 8 child slots.
fn child_probs(joint: &[f32; 256]) -> [f32; 8] {
    let mut p = [0f32; 8];
    for (o, &v) in joint.iter().enumerate().skip(1) {
        for (b, pb) in p.iter_mut().enumerate() {
            if o & (1 << b) != 0 {
                *pb += v;
            }
        }
    }
    p
}

struct Candidate {
    prob: f32,
    key: u64,
    coord: Coord,
}

fn select(mut cands: Vec<Candidate>, k: usize) -> Vec<Coord> {
    cands.sort_by(|a, b| b.prob.partial_cmp(&a.prob).unwrap_or(Ordering::Equal).then(a.key.cmp(&b.key)));
    cands.truncate(k);
    cands.into_iter().map(|c| c.coord).collect()
}

fn candidates(voxels: &[Coord], joints: &[[f32; 256]]) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(voxels.len() * 8);
    for (&v, joint) in voxels.iter().zip(joints) {
        for (b, &prob) in child_probs(joint).iter().enumerate() {
            let c = crate::geometry::child_at(v, b as u8);
            out.push(Candidate {
                prob,
                key: key(c),
                coord: c,
            });
        }
    }
    out
}

fn codes_of(voxels: &[Coord], selected: &[Coord]) -> Vec<u8> {
    let keys: Vec<u64> = voxels.iter().map(|&c| key(c)).collect();
    let mut codes = vec![0u8; voxels.len()];
    for &c in selected {
        let i = keys.binary_search(&key(parent_of(c))).expect("selected child has a parent");
        codes[i] |= 1 << child_bit(c);
    }
    codes
}

fn sorted(mut v: Vec<Coord>) -> Vec<Coord> {
    v.sort_unstable_by_key(|&c| key(c));
    v
}

/// Picks the `k` most probable children of the voxels described by
/// `parents` (whose codes are known). G1 voxels are ranked first with a
/// quota proportional to their candidate count; G2 voxels are then ranked
/// with G1 codes taken from the G1 selection. Ties go to the lower Morton
/// key. Returns exactly `k` Morton-sorted child coordinates.
pub fn topk_reconstruct(parents: &OccupancyLevel, k: usize, params: &UcmParams) -> Result<Vec<Coord>> {
    let voxels = o2v(&parents.coords, &parents.codes)?;
    let max = 8 * voxels.len();
    if k == 0 || k > max {
        return Err(Error::InvalidK { k, max });
    }
    let model = LevelModel::new(params, parents, &voxels)?;
    let part = model.partition().clone();
    let (n1, n2) = (8 * part.g1.len(), 8 * part.g2.len());
    let k2 = k * n2 / (n1 + n2);
    let k1 = k - k2;

    let g1: Vec<Coord> = part.g1.iter().map(|&i| voxels[i]).collect();
    let mut joints1 = model.joint_pmfs(Head::G1Low, &model.g1_context())?;
    joints1.iter_mut().for_each(renormalize_nonzero);
    let sel1 = select(candidates(&g1, &joints1), k1);
    let mut out = sel1.clone();
    if k2 > 0 {
        let codes1 = codes_of(&g1, &sorted(sel1));
        let g2: Vec<Coord> = part.g2.iter().map(|&i| voxels[i]).collect();
        let mut joints2 = model.joint_pmfs(Head::G2Low, &model.g2_context(&codes1)?)?;
        joints2.iter_mut().for_each(renormalize_nonzero);
        out.extend(select(candidates(&g2, &joints2), k2));
    }
    Ok(sorted(out))
}

/// Top-k below the root, where no model context exists: every child is
/// equally likely, so the first `k` in Morton order win.
pub fn topk_from_root(k: usize) -> Result<Vec<Coord>> {
    if k == 0 || k > 8 {
        return Err(Error::InvalidK { k, max: 8 });
    }
    Ok(sorted((0..8u8).map(|b| crate::geometry::child_at([0, 0, 0], b)).collect())[..k].to_vec())
}
