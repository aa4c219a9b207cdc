//! Central finite-difference checks of the backward operators.
//!
//! Each check builds a random small instance, contracts the operator output
//! with a random upstream gradient into a scalar (accumulated in f64), and
//! compares `(L(x + h) - L(x - h)) / (x+h - x-h)` against the analytic
//! gradient. The reported error is `max |fd - an| / max |an|` over the
//! checked tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cube_offsets, relu, relu_backward, softmax_cross_entropy, DenseLayer, Embedding, Mat, NeighborMap, SparseConvKernel};
use crate::geometry::{sort_dedup, Coord};

pub const FD_STEP: f32 = 1e-3;

/// `(tensor name, relative error)` per checked tensor.
pub type GradReport = Vec<(String, f64)>;

/// Central differences of `f` w.r.t. every entry of `x`.
pub fn numeric_grad(x: &mut [f32], h: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x[i];
        let (xp, xm) = (v + h, v - h);
        x[i] = xp;
        let fp = f(x);
        x[i] = xm;
        let fm = f(x);
        x[i] = v;
        out.push((fp - fm) / (f64::from(xp) - f64::from(xm)));
    }
    out
}

/// Like [`numeric_grad`] but returns `None` for entries whose one-sided
/// differences disagree by more than `kink_tol` (relative), i.e. where the
/// step straddles a ReLU kink.
pub fn numeric_grad_smooth(x: &mut [f32], h: f32, kink_tol: f64, mut f: impl FnMut(&[f32]) -> f64) -> Vec<Option<f64>> {
    let f0 = f(x);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x[i];
        let (xp, xm) = (v + h, v - h);
        x[i] = xp;
        let fp = f(x);
        x[i] = xm;
        let fm = f(x);
        x[i] = v;
        let fwd = (fp - f0) / (f64::from(xp) - f64::from(v));
        let bwd = (f0 - fm) / (f64::from(v) - f64::from(xm));
        let central = (fp - fm) / (f64::from(xp) - f64::from(xm));
        let smooth = (fwd - bwd).abs() <= kink_tol * fwd.abs().max(bwd.abs()).max(1e-3);
        out.push(smooth.then_some(central));
    }
    out
}

pub fn rel_err(fd: &[f64], an: &[f32]) -> f64 {
    let scale = an.iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max);
    let diff = fd.iter().zip(an).map(|(f, a)| (f - f64::from(*a)).abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn contract(y: &Mat, g: &Mat) -> f64 {
    y.data.iter().zip(&g.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

pub fn check_dense(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
    let mut layer = DenseLayer::init(i, o, 1.0, &mut rng);
    layer.b = super::Tensor::uniform(&[o], 0.5, &mut rng);
    let mut x = random_mat(&mut rng, n, i);
    let gy = random_mat(&mut rng, n, o);
    let mut grad = DenseLayer::zeros(i, o);
    let gx = layer.backward(&x, &gy, &mut grad);

    let mut rep = GradReport::new();
    let base = layer.clone();
    let fd = numeric_grad(&mut layer.w.data, FD_STEP, |w| {
        let mut l = base.clone();
        l.w.data.copy_from_slice(w);
        contract(&l.forward(&x).unwrap(), &gy)
    });
    rep.push(("dense.w".into(), rel_err(&fd, &grad.w.data)));
    let fd = numeric_grad(&mut layer.b.data, FD_STEP, |b| {
        let mut l = base.clone();
        l.b.data.copy_from_slice(b);
        contract(&l.forward(&x).unwrap(), &gy)
    });
    rep.push(("dense.b".into(), rel_err(&fd, &grad.b.data)));
    let (rows, cols) = (x.rows, x.cols);
    let fd = numeric_grad(&mut x.data, FD_STEP, |xd| {
        let xm = Mat {
            rows,
            cols,
            data: xd.to_vec(),
        };
        contract(&base.forward(&xm).unwrap(), &gy)
    });
    rep.push(("dense.x".into(), rel_err(&fd, &gx.data)));
    rep
}

pub fn check_embedding(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, c, n) = (rng.random_range(2..10), rng.random_range(1..6), rng.random_range(1..12));
    let mut emb = Embedding::init(v, c, 1.0, &mut rng);
    let idx: Vec<u8> = (0..n).map(|_| rng.random_range(0..v) as u8).collect();
    let gy = random_mat(&mut rng, n, c);
    let mut grad = Embedding::zeros(v, c);
    emb.backward(&idx, &gy, &mut grad);
    let fd = numeric_grad(&mut emb.table.data, FD_STEP, |t| {
        let e = Embedding {
            table: super::Tensor {
                shape: vec![v, c],
                data: t.to_vec(),
            },
        };
        contract(&e.lookup(&idx), &gy)
    });
    vec![("embedding.table".into(), rel_err(&fd, &grad.table.data))]
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, side: u32) -> Vec<Coord> {
    let mut c: Vec<Coord> = (0..n)
        .map(|_| [rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)])
        .collect();
    sort_dedup(&mut c);
    c
}

pub fn check_sparse_conv(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ni, no) = (rng.random_range(2..25), rng.random_range(1..20));
    let input = random_coords(&mut rng, ni, 4);
    let output = random_coords(&mut rng, no, 4);
    let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut k = SparseConvKernel::init(cube_offsets(1), ci, co, 1.0, &mut rng);
    k.b = super::Tensor::uniform(&[co], 0.5, &mut rng);
    let mut x = random_mat(&mut rng, input.len(), ci);
    let gy = random_mat(&mut rng, output.len(), co);
    let nbr = NeighborMap::build(&input, &output, &k.offsets);
    let mut grad = SparseConvKernel::zeros(k.offsets.clone(), ci, co);
    let gx = nbr.conv_backward(&x, &k, &gy, &mut grad);

    let base = k.clone();
    let mut rep = GradReport::new();
    let fd = numeric_grad(&mut k.w.data, FD_STEP, |w| {
        let mut kk = base.clone();
        kk.w.data.copy_from_slice(w);
        contract(&nbr.conv(&x, &kk).unwrap(), &gy)
    });
    rep.push(("sparse_conv.w".into(), rel_err(&fd, &grad.w.data)));
    let fd = numeric_grad(&mut k.b.data, FD_STEP, |b| {
        let mut kk = base.clone();
        kk.b.data.copy_from_slice(b);
        contract(&nbr.conv(&x, &kk).unwrap(), &gy)
    });
    rep.push(("sparse_conv.b".into(), rel_err(&fd, &grad.b.data)));
    let (rows, cols) = (x.rows, x.cols);
    let fd = numeric_grad(&mut x.data, FD_STEP, |xd| {
        let xm = Mat {
            rows,
            cols,
            data: xd.to_vec(),
        };
        contract(&nbr.conv(&xm, &base).unwrap(), &gy)
    });
    rep.push(("sparse_conv.x".into(), rel_err(&fd, &gx.data)));
    rep
}

pub fn check_relu(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..8), rng.random_range(1..8));
    // keep inputs away from the kink
    let mut x = random_mat(&mut rng, n, c);
    for v in &mut x.data {
        *v = v.signum() * (v.abs() + 0.05);
    }
    let gy = random_mat(&mut rng, n, c);
    let gx = relu_backward(&x, &gy);
    let fd = numeric_grad(&mut x.data, FD_STEP, |xd| {
        let xm = Mat {
            rows: n,
            cols: c,
            data: xd.to_vec(),
        };
        contract(&relu(&xm), &gy)
    });
    vec![("relu.x".into(), rel_err(&fd, &gx.data))]
}

pub fn check_softmax_cross_entropy(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..6), rng.random_range(2..17));
    let mut logits = random_mat(&mut rng, n, c);
    for v in &mut logits.data {
        *v *= 3.0;
    }
    let targets: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
    let (_, g) = softmax_cross_entropy(&logits, &targets, 1.0);
    let fd = numeric_grad(&mut logits.data, FD_STEP, |l| {
        let m = Mat {
            rows: n,
            cols: c,
            data: l.to_vec(),
        };
        softmax_cross_entropy(&m, &targets, 1.0).0
    });
    vec![("softmax_cross_entropy.logits".into(), rel_err(&fd, &g.data))]
}

/// All operator checks for one seed.
pub fn check_operators(seed: u64) -> GradReport {
    let mut rep = check_dense(seed);
    rep.extend(check_embedding(seed));
    rep.extend(check_sparse_conv(seed));
    rep.extend(check_relu(seed));
    rep.extend(check_softmax_cross_entropy(seed));
    rep
}
