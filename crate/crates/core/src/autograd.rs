//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Operations are appended to the tape in execution order, so
//! the backward sweep is a single reverse walk. Loss functions live outside
//! the graph: callers compute loss gradients with respect to graph outputs
//! and hand them to [`Graph::backward`] as seeds.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// # Panics
    /// On duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }
}

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2D convolution from an input grid to an output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { channels, h, w, k, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside the row.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    // Largest ox with ox·stride + kx − pad ≤ w − 1.
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let hw_out = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + start;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in x[base..base + (hi - lo)].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in x[base..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize, out_ch: usize, cols: Option<Vec<T>> },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize, in_ch: usize },
    Linear { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddRows { x: Var, rows: Var },
    RepeatRows { x: Var },
    Tokens { x: Var },
    MeanPool { x: Var },
    Reverse(Var),
    Reshape(Var),
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter, `None` when the parameter was unused or
    /// received no gradient.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).copied().flatten().and_then(|v| self.grads[v.0].as_ref())
    }

    /// Moves every parameter gradient out, indexed by [`ParamId`].
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        let params = std::mem::take(&mut self.params);
        params.into_iter().map(|v| v.and_then(|v| self.grads[v.0].take())).collect()
    }
}

/// One forward/backward tape.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    record: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// A tape that records everything needed for [`Graph::backward`].
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], record: true }
    }

    /// A forward-only tape; calling `backward` on it panics.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self { record: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad: requires_grad && self.record });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::of`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, requires_grad: self.record });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// 2D convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (n, co) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * co * cols_n];
        let mut cols = if geom.is_pointwise() { None } else { Some(vec![T::zero(); n * rows * cols_n]) };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let in_len = xs[1] * xs[2] * xs[3];
            for s in 0..n {
                let xs_n = &xv[s * in_len..(s + 1) * in_len];
                let col: &[T] = match cols.as_mut() {
                    Some(buf) => {
                        let dst = &mut buf[s * rows * cols_n..(s + 1) * rows * cols_n];
                        im2col(xs_n, &geom, dst);
                        dst
                    }
                    None => xs_n,
                };
                let dst = &mut out[s * co * cols_n..(s + 1) * co * cols_n];
                gemm(T::one(), MatRef::new(wv, co, rows), MatRef::new(col, rows, cols_n), T::zero(), dst, cols_n, 1);
                for (c, chunk) in dst.chunks_mut(cols_n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        if !self.record {
            cols = None;
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[n, co, geom.ho, geom.wo], out);
        self.push(value, Op::Conv2d { x, w, b, geom, batch: n, out_ch: co, cols }, rg)
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`]).
    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`; output side is
    /// `(H − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let (n, ci, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let ho = (hi - 1) * stride + k - 2 * pad;
        let wo = (wi - 1) * stride + k - 2 * pad;
        // Geometry of the forward convolution that maps the output grid onto the input grid.
        let geom = ConvGeom::new(co, ho, wo, k, stride, pad);
        assert_eq!((geom.ho, geom.wo), (hi, wi), "inconsistent transposed convolution geometry");
        let rows = geom.col_rows();
        let mut out = vec![T::zero(); n * co * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let mut cols = vec![T::zero(); rows * hi * wi];
            for s in 0..n {
                let xs_n = &xv[s * ci * hi * wi..(s + 1) * ci * hi * wi];
                gemm(
                    T::one(),
                    MatRef::transposed(wv, ci, rows),
                    MatRef::new(xs_n, ci, hi * wi),
                    T::zero(),
                    &mut cols,
                    hi * wi,
                    1,
                );
                let dst = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
                col2im(&cols, &geom, dst);
                for (c, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::from_vec(&[n, co, ho, wo], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom, batch: n, in_ch: ci }, rg)
    }

    /// Affine map on rows: `x: [R, I]`, `w: [O, I]`, `b: [O]` → `[R, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 2, "linear input must be 2D");
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (r, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); r * o];
        {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
            gemm(
                T::one(),
                MatRef::new(self.value(x).data(), r, i),
                MatRef::transposed(self.value(w).data(), o, i),
                T::one(),
                &mut out,
                o,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::from_vec(&[r, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Layer normalization over the last axis of a 2D input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "layer_norm input must be 2D");
        let (r, d) = (xs[0], xs[1]);
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bb = self.value(beta).data();
            let inv_d = T::one() / T::of(d as f64);
            for row in 0..r {
                let src = &xv[row * d..(row + 1) * d];
                let mean = src.iter().copied().sum::<T>() * inv_d;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + T::of(EPS)).sqrt();
                rstd[row] = rs;
                for j in 0..d {
                    let xh = (src[j] - mean) * rs;
                    xhat[row * d + j] = xh;
                    out[row * d + j] = xh * g[j] + bb[j];
                }
            }
        }
        if !self.record {
            xhat = Vec::new();
            rstd = Vec::new();
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::from_vec(&[r, d], out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [N·Lq, C]`, `k, v: [N·Lk, C]`; each of the `batch` samples attends
    /// only within its own rows. Returns `[N·Lq, C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        assert_eq!(self.shape(v), &ks[..], "attention key/value shape mismatch");
        assert_eq!(qs[1], ks[1], "attention width mismatch");
        let c = qs[1];
        assert!(heads > 0 && c % heads == 0, "attention width must divide into heads");
        assert!(qs[0] % batch == 0 && ks[0] % batch == 0, "attention rows must divide into the batch");
        let (lq, lk, d) = (qs[0] / batch, ks[0] / batch, c / heads);
        let scale = T::one() / T::of(d as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * lq * lk];
        let mut out = vec![T::zero(); qs[0] * c];
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for n in 0..batch {
                for h in 0..heads {
                    let qoff = n * lq * c + h * d;
                    let koff = n * lk * c + h * d;
                    let p = &mut probs[(n * heads + h) * lq * lk..(n * heads + h + 1) * lq * lk];
                    gemm(
                        scale,
                        MatRef::strided(&qv[qoff..], lq, d, c, 1),
                        MatRef::strided(&kv[koff..], lk, d, c, 1).t(),
                        T::zero(),
                        p,
                        lk,
                        1,
                    );
                    for row in p.chunks_mut(lk) {
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut z = T::zero();
                        for e in row.iter_mut() {
                            *e = (*e - m).exp();
                            z += *e;
                        }
                        let inv = T::one() / z;
                        row.iter_mut().for_each(|e| *e *= inv);
                    }
                    gemm(
                        T::one(),
                        MatRef::new(p, lq, lk),
                        MatRef::strided(&vv[koff..], lk, d, c, 1),
                        T::zero(),
                        &mut out[qoff..],
                        c,
                        1,
                    );
                }
            }
        }
        if !self.record {
            probs = Vec::new();
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(Tensor::from_vec(&[qs[0], c], out), Op::Attention { q, k, v, batch, heads, probs }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `x: [N·R, C] + rows: [R, C]`, broadcasting `rows` over the batch.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Var {
        let rs = self.shape(rows).to_vec();
        let mut value = self.value(x).clone();
        assert_eq!(value.shape()[1], rs[1], "add_rows width mismatch");
        assert_eq!(value.shape()[0] % rs[0], 0, "add_rows batch mismatch");
        let block = rs[0] * rs[1];
        let r = self.value(rows).data();
        for chunk in value.data_mut().chunks_mut(block) {
            for (a, &b) in chunk.iter_mut().zip(r) {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(rows);
        self.push(value, Op::AddRows { x, rows }, rg)
    }

    /// Tiles `x: [R, C]` into `[times·R, C]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[xs[0] * times, xs[1]], data), Op::RepeatRows { x }, rg)
    }

    /// Flattens `[N, C, H, W]` into row tokens `[N·H·W, C]`.
    pub fn tokens(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * hw * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &src[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    data[(s * hw + p) * c + ch] = v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n * hw, c], data), Op::Tokens { x }, rg)
    }

    /// Global average pooling `[N, C, H, W]` → `[N, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::MeanPool { x }, rg)
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn reverse_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::Reverse(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Reverse sweep seeded with `∂loss/∂v` for each `(v, grad)` pair.
    ///
    /// # Panics
    /// On an inference tape or on seed shape mismatches.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let Some(g) = (if keep { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            self.backward_node(i, g, &mut grads);
        }
        Gradients { grads, params: self.param_nodes.clone() }
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom, batch, out_ch, cols } => {
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.h * geom.w;
                let gd = g.data();
                if self.rg(*b) {
                    let mut db = vec![T::zero(); *out_ch];
                    for (j, chunk) in gd.chunks(cols_n).enumerate() {
                        db[j % out_ch] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[*out_ch], db));
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); out_ch * rows];
                    for s in 0..*batch {
                        let col = match cols {
                            Some(buf) => &buf[s * rows * cols_n..(s + 1) * rows * cols_n],
                            None => &xv[s * in_len..(s + 1) * in_len],
                        };
                        gemm(
                            T::one(),
                            MatRef::new(&gd[s * out_ch * cols_n..(s + 1) * out_ch * cols_n], *out_ch, cols_n),
                            MatRef::transposed(col, rows, cols_n),
                            T::one(),
                            &mut dw,
                            rows,
                            1,
                        );
                    }
                    accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * in_len];
                    let mut dcols = vec![T::zero(); rows * cols_n];
                    for s in 0..*batch {
                        let dst = &mut dx[s * in_len..(s + 1) * in_len];
                        let target: &mut [T] = if geom.is_pointwise() { dst } else { &mut dcols };
                        gemm(
                            T::one(),
                            MatRef::transposed(wv, *out_ch, rows),
                            MatRef::new(&gd[s * out_ch * cols_n..(s + 1) * out_ch * cols_n], *out_ch, cols_n),
                            T::zero(),
                            target,
                            cols_n,
                            1,
                        );
                        if !geom.is_pointwise() {
                            col2im(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch, in_ch } => {
                let out_len = geom.channels * geom.h * geom.w;
                let (rows, hw_in) = (geom.col_rows(), geom.col_cols());
                let gd = g.data();
                if self.rg(*b) {
                    let mut db = vec![T::zero(); geom.channels];
                    for (j, chunk) in gd.chunks(geom.h * geom.w).enumerate() {
                        db[j % geom.channels] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[geom.channels], db));
                }
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = if self.rg(*w) { Some(vec![T::zero(); in_ch * rows]) } else { None };
                let mut dx = if self.rg(*x) { Some(vec![T::zero(); batch * in_ch * hw_in]) } else { None };
                let mut dcols = vec![T::zero(); rows * hw_in];
                for s in 0..*batch {
                    im2col(&gd[s * out_len..(s + 1) * out_len], geom, &mut dcols);
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            T::one(),
                            MatRef::new(&xv[s * in_ch * hw_in..(s + 1) * in_ch * hw_in], *in_ch, hw_in),
                            MatRef::transposed(&dcols, rows, hw_in),
                            T::one(),
                            dw,
                            rows,
                            1,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            T::one(),
                            MatRef::new(wv, *in_ch, rows),
                            MatRef::new(&dcols, rows, hw_in),
                            T::zero(),
                            &mut dx[s * in_ch * hw_in..(s + 1) * in_ch * hw_in],
                            hw_in,
                            1,
                        );
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (r, i_dim) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let gd = g.data();
                if self.rg(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * i_dim];
                    gemm(
                        T::one(),
                        MatRef::transposed(gd, r, o),
                        MatRef::new(self.value(*x).data(), r, i_dim),
                        T::zero(),
                        &mut dw,
                        i_dim,
                        1,
                    );
                    accumulate(grads, *w, Tensor::from_vec(&[o, i_dim], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); r * i_dim];
                    gemm(
                        T::one(),
                        MatRef::new(gd, r, o),
                        MatRef::new(self.value(*w).data(), o, i_dim),
                        T::zero(),
                        &mut dx,
                        i_dim,
                        1,
                    );
                    accumulate(grads, *x, Tensor::from_vec(&[r, i_dim], dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let xs = self.shape(*x);
                let (r, d) = (xs[0], xs[1]);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for row in 0..r {
                        for j in 0..d {
                            dg[j] += gd[row * d + j] * xhat[row * d + j];
                            db[j] += gd[row * d + j];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(grads, *gamma, Tensor::from_vec(&[d], dg));
                    }
                    if self.rg(*beta) {
                        accumulate(grads, *beta, Tensor::from_vec(&[d], db));
                    }
                }
                if self.rg(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); r * d];
                    for row in 0..r {
                        let (mut m1, mut m2) = (T::zero(), T::zero());
                        for j in 0..d {
                            let dxh = gd[row * d + j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xhat[row * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gd[row * d + j] * gam[j];
                            dx[row * d + j] = rstd[row] * (dxh - m1 - xhat[row * d + j] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::from_vec(&[r, d], dx));
                }
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let (qs, ks) = (self.shape(*q), self.shape(*k));
                let c = qs[1];
                let (lq, lk, d) = (qs[0] / batch, ks[0] / batch, c / heads);
                let scale = T::one() / T::of(d as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gd = g.data();
                let mut dq = vec![T::zero(); qs[0] * c];
                let mut dk = vec![T::zero(); ks[0] * c];
                let mut dv = vec![T::zero(); ks[0] * c];
                let mut dp = vec![T::zero(); lq * lk];
                for n in 0..*batch {
                    for h in 0..*heads {
                        let qoff = n * lq * c + h * d;
                        let koff = n * lk * c + h * d;
                        let p = &probs[(n * heads + h) * lq * lk..(n * heads + h + 1) * lq * lk];
                        let dout = MatRef::strided(&gd[qoff..], lq, d, c, 1);
                        gemm(T::one(), MatRef::new(p, lq, lk).t(), dout, T::zero(), &mut dv[koff..], c, 1);
                        gemm(
                            T::one(),
                            dout,
                            MatRef::strided(&vv[koff..], lk, d, c, 1).t(),
                            T::zero(),
                            &mut dp,
                            lk,
                            1,
                        );
                        for (prow, dprow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                            let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                            for (e, &pp) in dprow.iter_mut().zip(prow) {
                                *e = pp * (*e - dot);
                            }
                        }
                        gemm(
                            scale,
                            MatRef::new(&dp, lq, lk),
                            MatRef::strided(&kv[koff..], lk, d, c, 1),
                            T::zero(),
                            &mut dq[qoff..],
                            c,
                            1,
                        );
                        gemm(
                            scale,
                            MatRef::new(&dp, lq, lk).t(),
                            MatRef::strided(&qv[qoff..], lq, d, c, 1),
                            T::zero(),
                            &mut dk[koff..],
                            c,
                            1,
                        );
                    }
                }
                if self.rg(*q) {
                    accumulate(grads, *q, Tensor::from_vec(qs, dq));
                }
                if self.rg(*k) {
                    accumulate(grads, *k, Tensor::from_vec(ks, dk));
                }
                if self.rg(*v) {
                    accumulate(grads, *v, Tensor::from_vec(ks, dv));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = g.data().iter().zip(xv).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Sigmoid(x) => {
                let yv = self.value(Var(i)).data();
                let data = g.data().iter().zip(yv).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRows { x, rows } => {
                if self.rg(*rows) {
                    let rs = self.shape(*rows);
                    let mut dr = vec![T::zero(); rs[0] * rs[1]];
                    for chunk in g.data().chunks(dr.len()) {
                        for (a, &v) in dr.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *rows, Tensor::from_vec(rs, dr));
                }
                if self.rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::RepeatRows { x } => {
                let xs = self.shape(*x);
                let mut dx = vec![T::zero(); xs[0] * xs[1]];
                for chunk in g.data().chunks(dx.len()) {
                    for (a, &v) in dx.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xs, dx));
            }
            Op::Tokens { x } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * hw];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(s * c + ch) * hw + p] = gd[(s * hw + p) * c + ch];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xs, dx));
            }
            Op::MeanPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                accumulate(grads, *x, Tensor::from_vec(xs, dx));
            }
            Op::Reverse(x) => {
                accumulate(grads, *x, g.map(|v| -v));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, g.reshaped(&shape));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
