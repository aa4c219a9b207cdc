use rand::Rng;

use super::{axpy, dot, relu, Mat, Tensor};
use crate::{Error, Result};

/// Affine layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    /// Uniform init scaled by `gain / sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, gain: f32, rng: &mut R) -> Self {
        let bound = gain * (3.0 / input as f32).sqrt();
        Self {
            w: Tensor::uniform(&[output, input], bound, rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let (out_dim, in_dim) = (self.output_dim(), self.input_dim());
        if x.cols != in_dim {
            return Err(Error::ShapeError(format!("dense layer expects {in_dim} inputs, got {}", x.cols)));
        }
        let mut y = Mat::zeros(x.rows, out_dim);
        for r in 0..x.rows {
            self.forward_row(x.row(r), y.row_mut(r));
        }
        Ok(y)
    }

    #[inline]
    pub fn forward_row(&self, x: &[f32], y: &mut [f32]) {
        let in_dim = self.input_dim();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(&self.w.data[o * in_dim..(o + 1) * in_dim], x) + self.b.data[o];
        }
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &Mat, grad_y: &Mat, grad: &mut DenseLayer) -> Mat {
        let (out_dim, in_dim) = (self.output_dim(), self.input_dim());
        let mut grad_x = Mat::zeros(x.rows, in_dim);
        for r in 0..x.rows {
            let gy = grad_y.row(r);
            let xr = x.row(r);
            let gx = grad_x.row_mut(r);
            for o in 0..out_dim {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                axpy(g, &self.w.data[o * in_dim..(o + 1) * in_dim], gx);
                axpy(g, xr, &mut grad.w.data[o * in_dim..(o + 1) * in_dim]);
                grad.b.data[o] += g;
            }
        }
        grad_x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Runs `layers` in sequence; `hidden` is applied after every layer except
/// the last, whose outputs stay raw logits.
pub fn mlp_forward(x: &Mat, layers: &[DenseLayer], hidden: Activation) -> Result<Mat> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(&h)?;
        if i + 1 < layers.len() && hidden == Activation::Relu {
            h = relu(&h);
        }
    }
    Ok(h)
}

/// Lookup table `[vocab, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn zeros(vocab: usize, channels: usize) -> Self {
        Self {
            table: Tensor::zeros(&[vocab, channels]),
        }
    }

    pub fn init<R: Rng>(vocab: usize, channels: usize, bound: f32, rng: &mut R) -> Self {
        Self {
            table: Tensor::uniform(&[vocab, channels], bound, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.table.shape[1]
    }

    pub fn vocab(&self) -> usize {
        self.table.shape[0]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.table.data[i * c..(i + 1) * c]
    }

    pub fn lookup(&self, idx: &[u8]) -> Mat {
        let c = self.channels();
        let mut out = Mat::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i as usize));
        }
        out
    }

    /// `x[r] += table[idx[r]]`.
    pub fn add_to(&self, idx: &[u8], x: &mut Mat) {
        for (r, &i) in idx.iter().enumerate() {
            axpy(1.0, self.row(i as usize), x.row_mut(r));
        }
    }

    pub fn backward(&self, idx: &[u8], grad_y: &Mat, grad: &mut Embedding) {
        let c = self.channels();
        for (r, &i) in idx.iter().enumerate() {
            let i = i as usize;
            axpy(1.0, grad_y.row(r), &mut grad.table.data[i * c..(i + 1) * c]);
        }
    }
}
