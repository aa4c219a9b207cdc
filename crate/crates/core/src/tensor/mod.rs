//! Small deterministic tensor toolkit: row-major matrices, dense layers,
//! embeddings, sparse 3D convolution on Morton-sorted voxels, softmax
//! cross-entropy and Adam. Every reduction runs in a fixed serial order, so
//! identical inputs give bit-identical outputs.

mod adam;
mod dense;
pub mod gradcheck;
mod serialize;
mod sparse_conv;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::{mlp_forward, Activation, DenseLayer, Embedding};
pub use serialize::{read_tensors, write_tensors, ManifestEntry, TensorRecord};
pub use sparse_conv::{cube_offsets, sparse_conv, sparse_conv_backward, NeighborMap, SparseConvKernel, SparseFeatureMap};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{Error, Result};

/// Flat f32 parameter array with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major matrix of f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeError(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self[idx[o]] += src[o]`.
    pub fn scatter_add(&mut self, idx: &[usize], src: &Mat) {
        for (o, &i) in idx.iter().enumerate() {
            axpy(1.0, src.row(o), self.row_mut(i));
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// `[self | other]` column-wise.
    pub fn concat_cols(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut out = Mat::zeros(self.rows, cols);
        for r in 0..self.rows {
            let row = out.row_mut(r);
            row[..self.cols].copy_from_slice(self.row(r));
            row[self.cols..].copy_from_slice(other.row(r));
        }
        out
    }

    /// Splits columns at `at`.
    pub fn split_cols(&self, at: usize) -> (Mat, Mat) {
        let mut a = Mat::zeros(self.rows, at);
        let mut b = Mat::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            a.row_mut(r).copy_from_slice(&row[..at]);
            b.row_mut(r).copy_from_slice(&row[at..]);
        }
        (a, b)
    }
}

/// Dot product with eight fixed partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu(x: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient through ReLU given its pre-activation.
pub fn relu_backward(pre: &Mat, grad: &Mat) -> Mat {
    Mat {
        rows: pre.rows,
        cols: pre.cols,
        data: pre
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Summed cross-entropy (nats) of `targets` under softmax(`logits`) and the
/// gradient of `scale * loss` w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Mat, targets: &[u8], scale: f32) -> (f64, Mat) {
    debug_assert_eq!(logits.rows, targets.len());
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let g = grad.row_mut(r);
        softmax(logits.row(r), g);
        let p = g[t as usize].max(1e-30);
        loss -= f64::from(p.ln());
        g[t as usize] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..19).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..19).map(|i| 1.0 - i as f32 * 0.1).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-4);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut out = [0.0; 16];
        softmax(&[0.0; 16], &mut out);
        assert!(out.iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-7));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Mat::from_vec(2, 4, vec![0.3, -1.0, 2.0, 0.1, 1.5, 0.2, -0.7, 0.0]).unwrap();
        let targets = [2u8, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &targets, 1.0);
        let h = 1e-3f32;
        for i in 0..logits.data.len() {
            let mut p = logits.clone();
            p.data[i] += h;
            let mut m = logits.clone();
            m.data[i] -= h;
            let fd = (softmax_cross_entropy(&p, &targets, 1.0).0 - softmax_cross_entropy(&m, &targets, 1.0).0) / (2.0 * f64::from(h));
            assert!((fd as f32 - grad.data[i]).abs() < 1e-3, "{i}: {fd} vs {}", grad.data[i]);
        }
    }
}
