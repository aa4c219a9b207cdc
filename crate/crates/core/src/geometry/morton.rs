//! Morton (z-order) keys with the x bit highest inside each bit triplet.

use super::Coord;

/// Maximum supported coordinate bit depth.
pub const MAX_DEPTH: u8 = 16;

#[inline]
fn spread(v: u32) -> u64 {
    let mut x = u64::from(v) & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Bit-interleaved key of `coord`. The key only depends on the coordinate;
/// `depth` is accepted for symmetry with the rest of the API and checked in
/// debug builds.
#[inline]
pub fn morton_key(coord: Coord, depth: u8) -> u64 {
    debug_assert!(depth <= MAX_DEPTH);
    debug_assert!(coord.iter().all(|&c| u64::from(c) < (1u64 << depth.max(1))));
    key(coord)
}

#[inline]
pub(crate) fn key(c: Coord) -> u64 {
    (spread(c[0]) << 2) | (spread(c[1]) << 1) | spread(c[2])
}

/// Inverse of [`morton_key`].
#[inline]
pub fn morton_decode(key: u64) -> Coord {
    [compact(key >> 2), compact(key >> 1), compact(key)]
}

/// Sorts in Morton order and removes duplicates.
pub fn sort_dedup(coords: &mut Vec<Coord>) {
    coords.sort_unstable_by_key(|&c| key(c));
    coords.dedup();
}

/// True when `coords` is strictly increasing in Morton order.
pub fn is_strictly_sorted(coords: &[Coord]) -> bool {
    coords.windows(2).all(|w| key(w[0]) < key(w[1]))
}
