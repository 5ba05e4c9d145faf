//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every primitive computes its value eagerly when it is added to the
//! [`Graph`]; [`Graph::backward`] replays the tape in reverse and applies
//! each primitive's vector-Jacobian product.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution / pooling geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, idx: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Mse { x: Var, target: Tensor<T> },
    WeightedBce { p: Var, labels: Vec<T>, beta: T },
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool, stats: BatchStats<T> },
    Upsample2(Var),
}

/// Per-channel statistics seen by a training-mode batch normalization.
#[derive(Clone, Debug, Default)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over the `count` reduced elements.
    pub var: Vec<T>,
    pub count: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, col: &mut [T]) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, dx: &mut [T]) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves numel")
}

fn batch_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!("bmm {:?} x {:?}", a.shape(), b.shape())));
    }
    let bs = a.shape()[0];
    let (m, k) = if ta { (a.shape()[2], a.shape()[1]) } else { (a.shape()[1], a.shape()[2]) };
    let (k2, n) = if tb { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
    if k != k2 {
        return Err(Error::Shape(format!("bmm inner dims {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        T::gemm(
            ta,
            tb,
            m,
            n,
            k,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(vec![bs, m, n], out)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf; its gradient is returned by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics recorded by a training-mode [`Graph::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { train: true, stats, .. } => Some(stats),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::Shape(format!("matmul needs rank-2, got {:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = if ta { (av.shape()[1], av.shape()[0]) } else { (av.shape()[0], av.shape()[1]) };
        let (k2, n) = if tb { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(ta, tb, m, n, k, av.data(), bv.data(), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a[i]) · op(b[i])` over the leading axis of rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = batch_matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x = *x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(bv).for_each(|(x, y)| *x = *x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` broadcast over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).numel() != n {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v = *v + bb);
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x + bias[c]` for NCHW input.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.value(bias).numel() != s[1] {
            return Err(Error::Shape(format!("channel bias {:?} for input {s:?}", self.shape(bias))));
        }
        let hw = s[2] * s[3];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            let bb = b[i % s[1]];
            plane.iter_mut().for_each(|v| *v = *v + bb);
        }
        Ok(self.push(value, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::Shape(format!("mul_const {:?} vs {:?}", c.shape(), self.shape(x))));
        }
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().zip(c.data()).for_each(|(v, &m)| *v = *v * m);
        Ok(self.push(value, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(value, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.rank().checked_sub(1).ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let value = super::softmax(xv, axis)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Shape("layer_norm affine size".into()));
        }
        let eps = T::lit(eps);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let rows = xv.numel() / n.max(1);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        let nf = T::from_usize(n).unwrap();
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Row gather: `out[r] = table[idx[r]]`.
    pub fn embedding(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("embedding index {bad} >= {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, idx }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let value = permute_data(self.value(x), axes);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape("concat axis out of range".into()));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::Shape(format!("concat {:?} with {first:?}", s)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("narrow {axis}:{start}+{len} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_usize(xv.numel().max(1)).unwrap();
        let value = Tensor::scalar(xv.data().iter().copied().sum::<T>() / n);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        if target.shape() != self.shape(x) {
            return Err(Error::Shape(format!("mse target {:?} vs {:?}", target.shape(), self.shape(x))));
        }
        let xv = self.value(x);
        let n = T::from_usize(xv.numel().max(1)).unwrap();
        let s: T = xv.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / n);
        Ok(self.push(value, Op::Mse { x, target }, &[x]))
    }

    /// Mean of `-(beta * y * ln p + (1 - y) * ln(1 - p))` with `p` clamped
    /// to `[1e-7, 1 - 1e-7]`.
    pub fn weighted_bce(&mut self, p: Var, labels: Vec<T>, beta: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!("bce: {} probabilities, {} labels", pv.numel(), labels.len())));
        }
        let value = Tensor::scalar(super::loss::weighted_bce(pv.data(), &labels, beta));
        Ok(self.push(value, Op::WeightedBce { p, labels, beta }, &[p]))
    }

    /// 2-D convolution without bias. `x` is NCHW, `w` is `[Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let (ho, wo) = (conv_out(h, kh, spec), conv_out(wd, kw, spec));
        let kk = ci * kh * kw;
        let pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * ho * wo] };
        let mut out = vec![T::zero(); n * co * ho * wo];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for b in 0..n {
            let img = &xd[b * ci * h * wd..(b + 1) * ci * h * wd];
            let src: &[T] = if pointwise {
                img
            } else {
                im2col(img, ci, h, wd, kh, kw, spec, &mut col);
                &col
            };
            T::gemm(false, false, co, ho * wo, kk, wdat, src, T::zero(), &mut out[b * co * ho * wo..(b + 1) * co * ho * wo]);
        }
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, spec }, &[x, w]))
    }

    /// Max pooling with a square window; padding acts as negative infinity.
    pub fn max_pool2d(&mut self, x: Var, k: usize, spec: Conv2dSpec) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d input {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (conv_out(h, k, spec), conv_out(w, k, spec));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = base;
                    for ki in 0..k {
                        let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                at = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// NCHW → NC mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool input {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Batch normalization for NCHW input. `running = None` normalizes with
    /// the batch's own statistics (training); `Some((mean, var))` uses frozen
    /// statistics (inference).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[T], &[T])>, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.value(gamma).numel() != s[1] || self.value(beta).numel() != s[1] {
            return Err(Error::Shape(format!("batch_norm input {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let eps = T::lit(eps);
        let count = n * hw;
        let cnt = T::from_usize(count).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut stats = BatchStats { mean: vec![T::zero(); c], var: vec![T::zero(); c], count };
        match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape("batch_norm running stats size".into()));
                }
                stats.mean.copy_from_slice(m);
                stats.var.copy_from_slice(v);
            }
            None => {
                for b_ in 0..n {
                    for ch in 0..c {
                        let p = &xd[(b_ * c + ch) * hw..(b_ * c + ch + 1) * hw];
                        stats.mean[ch] = stats.mean[ch] + p.iter().copied().sum::<T>();
                    }
                }
                stats.mean.iter_mut().for_each(|m| *m = *m / cnt);
                for b_ in 0..n {
                    for ch in 0..c {
                        let m = stats.mean[ch];
                        let p = &xd[(b_ * c + ch) * hw..(b_ * c + ch + 1) * hw];
                        stats.var[ch] = stats.var[ch] + p.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                }
                stats.var.iter_mut().for_each(|v| *v = *v / cnt);
            }
        }
        let rstd: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b_ in 0..n {
            for ch in 0..c {
                let off = (b_ * c + ch) * hw;
                for i in off..off + hw {
                    let h = (xd[i] - stats.mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let train = running.is_none();
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, rstd, train, stats }, &[x, gamma, beta]))
    }

    /// Nearest-neighbour 2× spatial upsampling of NCHW input.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2 input {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * 4);
        for plane in xd.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        T::gemm(tb, true, k, m, n, bv.data(), g.data(), T::zero(), &mut da);
                    } else {
                        T::gemm(false, !tb, m, k, n, g.data(), bv.data(), T::zero(), &mut da);
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        T::gemm(true, ta, n, k, m, g.data(), av.data(), T::zero(), &mut db);
                    } else {
                        T::gemm(!ta, false, k, n, m, av.data(), g.data(), T::zero(), &mut db);
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                let bs = g.shape()[0];
                let (m, n) = (g.shape()[1], g.shape()[2]);
                let k = if ta { av.shape()[1] } else { av.shape()[2] };
                if self.wants(a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for s in 0..bs {
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        let bsl = &bv.data()[s * k * n..(s + 1) * k * n];
                        let dst = &mut da[s * m * k..(s + 1) * m * k];
                        if ta {
                            T::gemm(tb, true, k, m, n, bsl, gs, T::zero(), dst);
                        } else {
                            T::gemm(false, !tb, m, k, n, gs, bsl, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for s in 0..bs {
                        let gs = &g.data()[s * m * n..(s + 1) * m * n];
                        let asl = &av.data()[s * m * k..(s + 1) * m * k];
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if tb {
                            T::gemm(true, ta, n, k, m, gs, asl, T::zero(), dst);
                        } else {
                            T::gemm(!ta, false, k, n, m, asl, gs, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = g.clone();
                    da.data_mut().iter_mut().zip(bv.data()).for_each(|(x, &y)| *x = *x * y);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = g;
                    db.data_mut().iter_mut().zip(av.data()).for_each(|(x, &y)| *x = *x * y);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
                self.accumulate(grads, *x, g);
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*bias) {
                    let s = g.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); c];
                    for (p, plane) in g.data().chunks(hw).enumerate() {
                        db[p % c] = db[p % c] + plane.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::MulConst(x, c) => {
                let mut dx = g;
                dx.data_mut().iter_mut().zip(c.data()).for_each(|(v, &m)| *v = *v * m);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g;
                dx.data_mut().iter_mut().zip(out.data()).for_each(|(d, &y)| {
                    if y <= T::zero() {
                        *d = T::zero()
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g;
                dx.data_mut().iter_mut().zip(xv.data()).for_each(|(d, &v)| *d = *d * gelu_grad(v));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g;
                dx.data_mut().iter_mut().zip(out.data()).for_each(|(d, &y)| *d = *d * y * (T::one() - y));
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, &y)| *d = y * (*d - dot));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let mut dgam = vec![T::zero(); n];
                let mut dbet = vec![T::zero(); n];
                let mut dx = vec![T::zero(); g.numel()];
                let nf = T::from_usize(n).unwrap();
                for (r, grow) in g.data().chunks(n).enumerate() {
                    let h = &xhat[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        dgam[j] = dgam[j] + grow[j] * h[j];
                        dbet[j] = dbet[j] + grow[j];
                        let dh = grow[j] * gam[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * h[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] * (grow[j] * gam[j] - m1 - h[j] * m2);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgam)?);
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbet)?);
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Embedding { table, idx } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (r, &row) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[row * d + j] = dt[row * d + j] + g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(ts, dt)?);
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshape(s)?);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, permute_data(&g, &inv));
            }
            Op::Concat { xs, axis } => {
                let s = g.shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis] * inner;
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * s[*axis] * inner + offset;
                            d.extend_from_slice(&g.data()[base..base + len]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel().max(1)).unwrap();
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = T::lit(2.0) * g.data()[0] / T::from_usize(xv.numel().max(1)).unwrap();
                let d: Vec<T> = xv.data().iter().zip(target.data()).map(|(&a, &b)| k * (a - b)).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::WeightedBce { p, labels, beta } => {
                let pv = self.value(*p);
                let d = super::loss::weighted_bce_grad(pv.data(), labels, *beta);
                let scale = g.data()[0];
                let d = d.into_iter().map(|v| v * scale).collect();
                self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::Conv2d { x, w, spec } => {
                let (x, w, spec) = (*x, *w, *spec);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let kk = ci * kh * kw;
                let hw = ho * wo;
                let pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;
                let xd = self.value(x).data();
                let wdat = self.value(w).data();
                let mut dw = vec![T::zero(); co * kk];
                let mut dx = if self.wants(x) { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * hw] };
                let mut dcol = vec![T::zero(); kk * hw];
                for b in 0..n {
                    let gb = &g.data()[b * co * hw..(b + 1) * co * hw];
                    let img = &xd[b * ci * h * wd..(b + 1) * ci * h * wd];
                    if self.wants(w) {
                        let src: &[T] = if pointwise {
                            img
                        } else {
                            im2col(img, ci, h, wd, kh, kw, spec, &mut col);
                            &col
                        };
                        T::gemm(false, true, co, kk, hw, gb, src, T::one(), &mut dw);
                    }
                    if self.wants(x) {
                        let dst = &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd];
                        if pointwise {
                            T::gemm(true, false, kk, hw, co, wdat, gb, T::one(), dst);
                        } else {
                            T::gemm(true, false, kk, hw, co, wdat, gb, T::zero(), &mut dcol);
                            col2im(&dcol, ci, h, wd, kh, kw, spec, dst);
                        }
                    }
                }
                self.accumulate(grads, w, Tensor::new(ws, dw)?);
                if self.wants(x) {
                    self.accumulate(grads, x, Tensor::new(xs, dx)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    d[at] = d[at] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train, stats } => {
                let s = g.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let mut dgam = vec![T::zero(); c];
                let mut dbet = vec![T::zero(); c];
                let gd = g.data();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgam[ch] = dgam[ch] + gd[i] * xhat[i];
                            dbet[ch] = dbet[ch] + gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let cnt = T::from_usize(stats.count).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = gam[ch] * rstd[ch];
                            if *train {
                                let m1 = dbet[ch] / cnt;
                                let m2 = dgam[ch] / cnt;
                                for i in off..off + hw {
                                    dx[i] = k * (gd[i] - m1 - xhat[i] * m2);
                                }
                            } else {
                                for i in off..off + hw {
                                    dx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(s.clone(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(self.shape(*gamma).to_vec(), dgam)?);
                self.accumulate(grads, *beta, Tensor::new(self.shape(*beta).to_vec(), dbet)?);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::zero(); s.iter().product()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let i = (y / 2) * w + xx / 2;
                            plane[i] = plane[i] + gp[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar function of `params`, built from graph primitives.
pub fn grad<T: Scalar>(
    params: &[Tensor<T>],
    loss_fn: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}
