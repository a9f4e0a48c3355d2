//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] lives for one forward/backward pass. Parameters are pulled in
//! from a [`ParamStore`] by id; [`Graph::backward`] returns their gradients.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, sigmoid, softplus, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::bail_arg;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2 { x: Var, c: usize, h: usize, w: usize },
    Upsample2 { x: Var, c: usize, h: usize, w: usize },
    Gather { x: Var, idx: Arc<[usize]> },
    Concat(Vec<Var>),
    Reshape(Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs { x: Var, delta: T },
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Mean(Var),
    Sum(Var),
    ChannelMean(Var),
    SpectralNorm { w: Var, u: Arc<[T]>, v: Arc<[T]>, sigma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Argument(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Loads a trainable parameter (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.unary(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `x[c, ...] + v[c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let t = self.channel_op(x, v, "add_channel", |a, b| a + b)?;
        Ok(self.push(t, Op::AddChannel(x, v), &[x, v]))
    }

    /// `x[c, ...] · v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let t = self.channel_op(x, v, "mul_channel", |a, b| a * b)?;
        Ok(self.push(t, Op::MulChannel(x, v), &[x, v]))
    }

    fn channel_op(&self, x: Var, v: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.shape()[0];
        if tv.len() != c {
            return Err(shape_err(name, tx.shape(), tv.shape()));
        }
        let inner = tx.len() / c;
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, tv.data()[i / inner]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x[..., d] + b[d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_op(x, b, "add_row", |a, b| a + b)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[..., d] · b[d]`.
    pub fn mul_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_op(x, b, "mul_row", |a, b| a * b)?;
        Ok(self.push(t, Op::MulRow(x, b), &[x, b]))
    }

    fn row_op(&self, x: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = *tx.shape().last().expect("non-scalar");
        if tb.len() != d {
            return Err(shape_err(name, tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, tb.data()[i % d]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `a[.., m, k] · b[.., k, n]` (or `b[.., n, k]ᵀ` with `trans_b`), batched over a
    /// shared leading dimension when both operands are rank 3.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => (1, *m, *k, if trans_b { *c } else { *r }, if trans_b { *r } else { *c }),
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                (*ba, *m, *k, if trans_b { *c } else { *r }, if trans_b { *r } else { *c })
            }
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let (ra, rb) = (&da[bi * m * k..(bi + 1) * m * k], &db[bi * k * n..(bi + 1) * k * n]);
                let ro = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(ra, rb, ro, m, k, n);
                } else {
                    kernels::gemm_nn(ra, rb, ro, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b, batch, m, k, n }, &[a, b]))
    }

    /// Stride-1 zero-padded convolution: `x[c_in, h, w]`, `w[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([c_in, h, wd], [c_out, wc, k, k2]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(shape_err("conv2d", &sx, &sw));
        };
        if wc != c_in || k != k2 || k % 2 == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.value(b).len() != *c_out {
                return Err(shape_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom { c_in: *c_in, c_out: *c_out, h: *h, w: *wd, k: *k };
        let mut out = vec![T::zero(); c_out * h * wd];
        kernels::conv_forward(
            geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(vec![*c_out, *h, *wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv { x, w, b, geom }, &inputs))
    }

    fn chw(&self, x: Var, name: &str) -> Result<(usize, usize, usize)> {
        match self.shape(x) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Argument(format!("{name}: expected [c, h, w], got {s:?}"))),
        }
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            bail_arg!("avg_pool2 needs even dims, got {h}x{w}");
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = q * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2 { x, c, h, w }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample2 { x, c, h, w }, &[x]))
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`. Covers transposes, window
    /// tiling with edge clamping, pixel shuffles and crops.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != idx.len() {
            bail_arg!("gather shape {shape:?} does not match {} indices", idx.len());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            bail_arg!("gather index {bad} out of range {}", src.len());
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(shape_err("concat", &first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// `ln(1 + e^x)`; `softplus(-x) = -ln σ(x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.unary(x, softplus);
        self.push(t, Op::Softplus(x), &[x])
    }

    /// `|x|` with subgradient 0 at 0, or `sqrt(x² + δ²)` when `delta > 0`.
    pub fn abs(&mut self, x: Var, delta: T) -> Var {
        let t = if delta > T::zero() {
            self.unary(x, |v| (v * v + delta * delta).sqrt())
        } else {
            self.unary(x, |v| v.abs())
        };
        self.push(t, Op::Abs { x, delta }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v * v);
        self.push(t, Op::Square(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("non-scalar");
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("non-scalar");
        let dn = T::count(d);
        let mut data = tx.data().to_vec();
        let mut rstds = Vec::with_capacity(data.len() / d);
        for row in data.chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LayerNorm { x, rstd: rstds }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.data().iter().copied().sum::<T>() / T::count(tx.len());
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over everything but the leading axis: `[c, ...] -> [c]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        let inner = tx.len() / c;
        let n = T::count(inner);
        let data = tx
            .data()
            .chunks_exact(inner)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        let t = Tensor::new(vec![c], data).expect("channel count");
        self.push(t, Op::ChannelMean(x), &[x])
    }

    /// `w / σ` with `σ = uᵀ W v` for fixed singular-vector estimates; `w` is
    /// viewed as a `u.len() × v.len()` matrix. A zero `σ` is treated as 1.
    pub fn spectral_normalized(&mut self, w: Var, u: Arc<[T]>, v: Arc<[T]>) -> Result<Var> {
        let tw = self.value(w);
        let (rows, cols) = (u.len(), v.len());
        if rows * cols != tw.len() {
            bail_arg!("spectral norm vectors {rows}x{cols} do not match weight {:?}", tw.shape());
        }
        let wd = tw.data();
        let mut sigma = T::zero();
        for i in 0..rows {
            let mut acc = T::zero();
            for j in 0..cols {
                acc += wd[i * cols + j] * v[j];
            }
            sigma += u[i] * acc;
        }
        if sigma.abs() < T::lit(1e-30) {
            sigma = T::one();
        }
        let t = Tensor::new(tw.shape().to_vec(), wd.iter().map(|&x| x / sigma).collect())?;
        Ok(self.push(t, Op::SpectralNorm { w, u, v, sigma }, &[w]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            bail_arg!("backward needs a scalar output, got {:?}", self.shape(out));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        let mut params = Gradients::default();
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads, &mut params);
        }
        Ok(params)
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], params: &mut Gradients<T>) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
            Op::AddChannel(x, v) => {
                let c = val(*v).len();
                let inner = g.len() / c;
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*v, &mut |s| {
                    for (ch, part) in g.chunks_exact(inner).enumerate() {
                        s[ch] += part.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MulChannel(x, v) => {
                let (vx, vv) = (val(*x), val(*v));
                let inner = g.len() / vv.len();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vv[i / inner];
                    }
                });
                acc(*v, &mut |s| {
                    for i in 0..g.len() {
                        s[i / inner] += g[i] * vx[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let d = val(*b).len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % d] += gv;
                    }
                });
            }
            Op::MulRow(x, b) => {
                let (vx, vb) = (val(*x), val(*b));
                let d = vb.len();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % d];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..g.len() {
                        s[i % d] += g[i] * vx[i];
                    }
                });
            }
            Op::MatMul { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                for bi in 0..*batch {
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    let ra = &va[bi * m * k..(bi + 1) * m * k];
                    let rb = &vb[bi * k * n..(bi + 1) * k * n];
                    acc(*a, &mut |s| {
                        let sa = &mut s[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // dA = dC · B   with B stored [n, k]
                            kernels::gemm_nn(go, rb, sa, m, n, k);
                        } else {
                            // dA = dC · Bᵀ  with B stored [k, n]
                            kernels::gemm_nt(go, rb, sa, m, n, k);
                        }
                    });
                    acc(*b, &mut |s| {
                        let sb = &mut s[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            kernels::gemm_tn(go, ra, sb, n, m, k);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            kernels::gemm_tn(ra, go, sb, k, m, n);
                        }
                    });
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut gx = needs(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); vw.len()]);
                let mut gb = b.filter(|&b| needs(b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv_backward(*geom, vx, vw, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(gx) = gx {
                    acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, &g)| *s += g));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |s| s.iter_mut().zip(&gw).for_each(|(s, &g)| *s += g));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(s, &g)| *s += g));
                }
            }
            Op::AvgPool2 { x, c, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let q = T::lit(0.25);
                acc(*x, &mut |s| {
                    for ch in 0..*c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = q * g[(ch * oh + y) * ow + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                s[base] += gv;
                                s[base + 1] += gv;
                                s[base + w] += gv;
                                s[base + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { x, c, h, w } => {
                let (oh, ow) = (2 * h, 2 * w);
                acc(*x, &mut |s| {
                    for ch in 0..*c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                s[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, idx } => acc(*x, &mut |s| {
                for (&i, &gv) in idx.iter().zip(g) {
                    s[i] += gv;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let chunk = &g[off..off + n];
                    acc(p, &mut |s| s.iter_mut().zip(chunk).for_each(|(s, &g)| *s += g));
                    off += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
            Op::Silu(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(vx[i]);
                        s[i] += g[i] * sg * (T::one() + vx[i] * (T::one() - sg));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(vx[i]);
                    }
                });
            }
            Op::Abs { x, delta } => {
                let vx = val(*x);
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let d = if *delta > T::zero() {
                            vx[i] / y[i]
                        } else if vx[i] > T::zero() {
                            T::one()
                        } else if vx[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = T::lit(2.0);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * two * vx[i];
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("non-scalar");
                acc(*x, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                        let dot = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("non-scalar");
                let dn = T::count(d);
                acc(*x, &mut |s| {
                    for (r, ((srow, yrow), grow)) in s
                        .chunks_exact_mut(d)
                        .zip(y.chunks_exact(d))
                        .zip(g.chunks_exact(d))
                        .enumerate()
                    {
                        let mg = grow.iter().copied().sum::<T>() / dn;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            srow[j] += rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::count(self.nodes[x.0].value.len());
                let gv = g[0] / n;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += gv));
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::ChannelMean(x) => {
                let c = g.len();
                let inner = self.nodes[x.0].value.len() / c;
                let n = T::count(inner);
                acc(*x, &mut |s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i / inner] / n;
                    }
                });
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let vw = val(*w);
                let cols = v.len();
                let gw_dot = g.iter().zip(vw).map(|(&a, &b)| a * b).sum::<T>();
                let coef = gw_dot / (*sigma * *sigma);
                acc(*w, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / *sigma - coef * u[i / cols] * v[i % cols];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    /// Finite-difference check of d(sum(out ⊙ probe))/d(param) for a one-parameter graph.
    fn check(shape: Vec<usize>, seed: u64, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = rng_from_seed(seed);
        let n: usize = shape.iter().product();
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(shape, normal_vec(&mut rng, n)).unwrap());
        let weights_of = |g: &Graph<f64>, out: Var| -> Vec<f64> {
            let mut r = rng_from_seed(seed + 1000);
            normal_vec(&mut r, g.value(out).len())
        };
        let loss = |store: &ParamStore<f64>| -> (f64, Gradients<f64>) {
            let mut g = Graph::new();
            let p = g.param(store, id);
            let out = f(&mut g, p);
            let w = weights_of(&g, out);
            let wv = g.input(Tensor::new(g.shape(out).to_vec(), w).unwrap());
            let prod = g.mul(out, wv).unwrap();
            let s = g.sum(prod);
            (g.value(s).data()[0], g.backward(s).unwrap())
        };
        let (_, grads) = loss(&store);
        let analytic = grads.get(id).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..n {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + h;
            let (lp, _) = loss(&store);
            store.tensor_mut(id).data_mut()[i] = orig - h;
            let (lm, _) = loss(&store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let err = (num - analytic[i]).abs() / (num.abs() + analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "index {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn elementwise_ops() {
        check(vec![3, 4], 1, |g, p| g.silu(p));
        check(vec![3, 4], 2, |g, p| g.sigmoid(p));
        check(vec![3, 4], 3, |g, p| g.softplus(p));
        check(vec![3, 4], 4, |g, p| g.abs(p, 1e-3));
        check(vec![3, 4], 5, |g, p| g.square(p));
        check(vec![3, 4], 6, |g, p| g.mul(p, p).unwrap());
        check(vec![3, 4], 7, |g, p| g.scale(p, -2.5));
        check(vec![3, 4], 8, |g, p| {
            let s = g.softplus(p);
            g.sub(p, s).unwrap()
        });
    }

    #[test]
    fn reductions_and_norms() {
        check(vec![2, 5], 11, |g, p| g.softmax(p));
        check(vec![2, 5], 12, |g, p| g.layer_norm(p, 1e-5));
        check(vec![2, 5], 13, |g, p| g.mean(p));
        check(vec![3, 2, 2], 14, |g, p| g.channel_mean(p));
        check(vec![3, 2, 2], 15, |g, p| {
            let m = g.channel_mean(p);
            g.mul_channel(p, m).unwrap()
        });
        check(vec![3, 4], 16, |g, p| {
            let r = g.reshape(p, vec![12]).unwrap();
            let c = g.concat(&[r, r]).unwrap();
            g.reshape(c, vec![2, 12]).unwrap()
        });
    }

    #[test]
    fn broadcast_ops() {
        check(vec![4], 21, |g, p| {
            let x = g.input(Tensor::new(vec![4, 2, 3], (0..24).map(|v| v as f64 * 0.1).collect()).unwrap());
            let a = g.add_channel(x, p).unwrap();
            g.mul_channel(a, p).unwrap()
        });
        check(vec![3], 22, |g, p| {
            let x = g.input(Tensor::new(vec![5, 3], (0..15).map(|v| (v as f64).cos()).collect()).unwrap());
            let a = g.add_row(x, p).unwrap();
            g.mul_row(a, p).unwrap()
        });
    }

    #[test]
    fn matmul_both_layouts() {
        check(vec![2, 3, 4], 31, |g, p| g.matmul(p, p, true).unwrap());
        check(vec![3, 3], 32, |g, p| g.matmul(p, p, false).unwrap());
        check(vec![4, 3], 33, |g, p| {
            let b = g.input(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]).unwrap());
            g.matmul(p, b, false).unwrap()
        });
    }

    #[test]
    fn spatial_ops() {
        check(vec![2, 4, 6], 41, |g, p| g.avg_pool2(p).unwrap());
        check(vec![2, 2, 3], 42, |g, p| g.upsample2(p).unwrap());
        check(vec![2, 5, 4], 43, |g, p| {
            let w = g.input(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.3).sin()).collect()).unwrap());
            g.conv2d(p, w, None).unwrap()
        });
        check(vec![3, 2, 3, 3], 44, |g, p| {
            let x = g.input(Tensor::new(vec![2, 5, 4], (0..40).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap());
            g.conv2d(x, p, None).unwrap()
        });
        check(vec![3], 45, |g, p| {
            let x = g.input(Tensor::new(vec![2, 3, 3], (0..18).map(|v| v as f64 / 9.0).collect()).unwrap());
            let w = g.input(Tensor::new(vec![3, 2, 1, 1], vec![1.0, 0.5, -0.5, 2.0, 0.0, 1.0]).unwrap());
            g.conv2d(x, w, Some(p)).unwrap()
        });
        check(vec![6], 46, |g, p| {
            let idx: Arc<[usize]> = vec![5, 0, 0, 3, 2, 2, 2, 1].into();
            g.gather(p, idx, vec![2, 4]).unwrap()
        });
    }

    #[test]
    fn spectral_normalized_weight() {
        let u: Arc<[f64]> = vec![0.6, 0.8].into();
        let v: Arc<[f64]> = vec![0.0, 0.6, 0.8].into();
        check(vec![2, 3], 51, move |g, p| g.spectral_normalized(p, u.clone(), v.clone()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a, false).is_err());
        assert!(g.matmul(a, a, true).is_ok());
        assert!(g.avg_pool2(a).is_err());
        let s = g.sum(a);
        assert!(g.backward(a).is_err());
        assert!(g.backward(s).unwrap().is_empty());
    }
}
