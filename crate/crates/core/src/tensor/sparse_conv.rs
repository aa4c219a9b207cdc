use rand::Rng;

use super::{axpy, dot, Mat, Tensor};
use crate::geometry::{is_strictly_sorted, key, Coord};
use crate::{Error, Result};

/// Features attached to Morton-sorted voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap {
    pub coords: Vec<Coord>,
    pub feats: Mat,
}

impl SparseFeatureMap {
    pub fn new(coords: Vec<Coord>, feats: Mat) -> Result<Self> {
        if coords.len() != feats.rows {
            return Err(Error::ShapeError(format!(
                "{} coords but {} feature rows",
                coords.len(),
                feats.rows
            )));
        }
        if !is_strictly_sorted(&coords) {
            return Err(Error::InvariantViolation("feature map coords not sorted".into()));
        }
        Ok(Self { coords, feats })
    }

    pub fn channels(&self) -> usize {
        self.feats.cols
    }
}

/// All offsets of a `(2r+1)^3` cube, x-major.
pub fn cube_offsets(radius: i32) -> Vec<[i32; 3]> {
    let mut v = Vec::new();
    for dx in -radius..=radius {
        for dy in -radius..=radius {
            for dz in -radius..=radius {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Per-offset weights `[K, out, in]` plus a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseConvKernel {
    pub offsets: Vec<[i32; 3]>,
    pub w: Tensor,
    pub b: Tensor,
}

impl SparseConvKernel {
    pub fn zeros(offsets: Vec<[i32; 3]>, input: usize, output: usize) -> Self {
        let k = offsets.len();
        Self {
            offsets,
            w: Tensor::zeros(&[k, output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn init<R: Rng>(offsets: Vec<[i32; 3]>, input: usize, output: usize, gain: f32, rng: &mut R) -> Self {
        let k = offsets.len();
        let bound = gain * (3.0 / (input * k) as f32).sqrt();
        Self {
            offsets,
            w: Tensor::uniform(&[k, output, input], bound, rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape[2]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[1]
    }

    /// Largest |offset| component.
    pub fn reach(&self) -> i32 {
        self.offsets.iter().flat_map(|o| o.iter().map(|v| v.abs())).max().unwrap_or(0)
    }

    #[inline]
    fn slab(&self, k: usize) -> &[f32] {
        let n = self.output_dim() * self.input_dim();
        &self.w.data[k * n..(k + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys: Vec<_> = self.offsets.clone();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() != self.offsets.len() {
            return Err(Error::InvariantViolation("duplicate kernel offsets".into()));
        }
        if self.w.shape.len() != 3 || self.w.shape[0] != self.offsets.len() || self.b.len() != self.output_dim() {
            return Err(Error::ShapeError("kernel weight/bias shapes inconsistent".into()));
        }
        Ok(())
    }
}

const NONE: u32 = u32::MAX;

/// For each output voxel and kernel offset, the row of the input voxel at
/// `out + offset`, if occupied. Lookups are binary searches on Morton keys.
#[derive(Clone, Debug)]
pub struct NeighborMap {
    k: usize,
    idx: Vec<u32>,
}

impl NeighborMap {
    pub fn build(input: &[Coord], output: &[Coord], offsets: &[[i32; 3]]) -> Self {
        let keys: Vec<u64> = input.iter().map(|&c| key(c)).collect();
        let k = offsets.len();
        let mut idx = vec![NONE; output.len() * k];
        for (j, &o) in output.iter().enumerate() {
            for (ki, d) in offsets.iter().enumerate() {
                let x = i64::from(o[0]) + i64::from(d[0]);
                let y = i64::from(o[1]) + i64::from(d[1]);
                let z = i64::from(o[2]) + i64::from(d[2]);
                if x < 0 || y < 0 || z < 0 || x > i64::from(u32::MAX >> 1) || y > i64::from(u32::MAX >> 1) || z > i64::from(u32::MAX >> 1) {
                    continue;
                }
                if let Ok(i) = keys.binary_search(&key([x as u32, y as u32, z as u32])) {
                    idx[j * k + ki] = i as u32;
                }
            }
        }
        Self { k, idx }
    }

    pub fn outputs(&self) -> usize {
        self.idx.len().checked_div(self.k).unwrap_or(0)
    }

    #[inline]
    pub fn get(&self, out: usize, k: usize) -> Option<usize> {
        let v = self.idx[out * self.k + k];
        (v != NONE).then_some(v as usize)
    }

    /// Number of (output, offset) pairs with an occupied input.
    pub fn edges(&self) -> usize {
        self.idx.iter().filter(|&&v| v != NONE).count()
    }

    /// Forward pass over rows of `x` indexed like the map's input coords.
    pub fn conv(&self, x: &Mat, kernel: &SparseConvKernel) -> Result<Mat> {
        let (in_dim, out_dim) = (kernel.input_dim(), kernel.output_dim());
        if x.cols != in_dim {
            return Err(Error::ShapeError(format!("conv expects {in_dim} channels, got {}", x.cols)));
        }
        if kernel.offsets.len() != self.k {
            return Err(Error::ShapeError("kernel/neighbor map offset count mismatch".into()));
        }
        let mut y = Mat::zeros(self.outputs(), out_dim);
        for j in 0..self.outputs() {
            let yj = y.row_mut(j);
            yj.copy_from_slice(&kernel.b.data);
            for k in 0..self.k {
                if let Some(i) = self.get(j, k) {
                    let w = kernel.slab(k);
                    let xi = x.row(i);
                    for (o, yo) in yj.iter_mut().enumerate() {
                        *yo += dot(&w[o * in_dim..(o + 1) * in_dim], xi);
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates kernel gradients into `grad` and returns dL/dx.
    pub fn conv_backward(&self, x: &Mat, kernel: &SparseConvKernel, grad_y: &Mat, grad: &mut SparseConvKernel) -> Mat {
        let (in_dim, out_dim) = (kernel.input_dim(), kernel.output_dim());
        let slab = in_dim * out_dim;
        let mut gx = Mat::zeros(x.rows, in_dim);
        for j in 0..self.outputs() {
            let gy = grad_y.row(j);
            axpy(1.0, gy, &mut grad.b.data);
            for k in 0..self.k {
                let Some(i) = self.get(j, k) else { continue };
                let w = kernel.slab(k);
                let gw = &mut grad.w.data[k * slab..(k + 1) * slab];
                let xi = x.row(i);
                let gxi = gx.row_mut(i);
                for o in 0..out_dim {
                    let g = gy[o];
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &w[o * in_dim..(o + 1) * in_dim], gxi);
                    axpy(g, xi, &mut gw[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
        gx
    }
}

/// `out[j] = b + sum_{d : j + d occupied} W(d) in[j + d]`.
pub fn sparse_conv(input: &SparseFeatureMap, kernel: &SparseConvKernel, out_coords: &[Coord]) -> Result<SparseFeatureMap> {
    if !is_strictly_sorted(out_coords) {
        return Err(Error::InvariantViolation("output coords not sorted".into()));
    }
    let nbr = NeighborMap::build(&input.coords, out_coords, &kernel.offsets);
    let feats = nbr.conv(&input.feats, kernel)?;
    SparseFeatureMap::new(out_coords.to_vec(), feats)
}

/// Gradients of [`sparse_conv`] w.r.t. its input features and kernel.
pub fn sparse_conv_backward(
    input: &SparseFeatureMap,
    kernel: &SparseConvKernel,
    out_coords: &[Coord],
    grad_out: &Mat,
) -> Result<(Mat, SparseConvKernel)> {
    if grad_out.rows != out_coords.len() || grad_out.cols != kernel.output_dim() {
        return Err(Error::ShapeError("grad_out does not match conv output".into()));
    }
    if input.feats.cols != kernel.input_dim() {
        return Err(Error::ShapeError("input channels do not match kernel".into()));
    }
    let nbr = NeighborMap::build(&input.coords, out_coords, &kernel.offsets);
    let mut grad = SparseConvKernel::zeros(kernel.offsets.clone(), kernel.input_dim(), kernel.output_dim());
    let gx = nbr.conv_backward(&input.feats, kernel, grad_out, &mut grad);
    Ok((gx, grad))
}
