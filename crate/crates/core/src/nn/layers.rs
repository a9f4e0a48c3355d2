//! Parameterised building blocks and layout helpers shared by the networks.

use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::bail_arg;
use crate::rng::normal_vec;
use crate::{ImageGrid, Result, Scalar};

fn init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let n = shape.iter().product();
    let std = T::lit((1.0 / fan_in as f64).sqrt());
    let data = normal_vec::<T, R>(rng, n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Square same-padded convolution over `[c, h, w]` feature maps.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init(rng, vec![c_out, c_in, k, k], c_in * k * k));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv2d(x, w, Some(b))
    }
}

/// `x[n, in] · Wᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init(rng, vec![d_out, d_in], d_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.matmul(x, w, true)?;
        g.add_row(y, b)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::new(vec![d], vec![T::one(); d]).expect("shape"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(1e-5));
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// `softmax(q kᵀ / √d) v` for `q[n, d]`, `k[m, d]`, `v[m, d]` (or batched `[b, ·, d]`).
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().expect("non-scalar");
    let scores = g.matmul(q, k, true)?;
    let scaled = g.scale(scores, T::one() / T::count(d).sqrt());
    let weights = g.softmax(scaled);
    g.matmul(weights, v, false)
}

/// Gather indices transposing a `[rows, cols]` matrix.
pub fn transpose_index(rows: usize, cols: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            idx.push(r * cols + c);
        }
    }
    idx.into()
}

/// `[r, c]` → `[c, r]`.
pub fn transpose<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (r, c) = match g.shape(x) {
        [r, c] => (*r, *c),
        s => bail_arg!("transpose expects a matrix, got {s:?}"),
    };
    g.gather(x, transpose_index(r, c), vec![c, r])
}

/// `[c, h, w]` feature map → `[h·w, c]` token matrix.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (c, h, w) = match g.shape(x) {
        [c, h, w] => (*c, *h, *w),
        s => bail_arg!("to_tokens expects [c, h, w], got {s:?}"),
    };
    g.gather(x, transpose_index(c, h * w), vec![h * w, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = match g.shape(x) {
        [n, c] if *n == h * w => *c,
        s => bail_arg!("from_tokens expects [{}, c], got {s:?}", h * w),
    };
    g.gather(x, transpose_index(h * w, c), vec![c, h, w])
}

/// Interleaved HWC image → planar `[c, h, w]` tensor.
pub fn grid_to_tensor<T: Scalar>(grid: &ImageGrid<T>) -> Tensor<T> {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let src = grid.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for i in 0..h * w {
            data.push(src[i * c + ch]);
        }
    }
    Tensor::new(vec![c, h, w], data).expect("grid shape")
}

/// Planar `[c, h, w]` tensor → interleaved image (values unclamped).
pub fn tensor_to_grid<T: Scalar>(t: &Tensor<T>) -> Result<ImageGrid<T>> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail_arg!("expected [c, h, w] tensor, got {s:?}"),
    };
    let src = t.data();
    let mut data = vec![T::zero(); src.len()];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = src[ch * h * w + i];
        }
    }
    ImageGrid::new(h, w, c, data)
}
