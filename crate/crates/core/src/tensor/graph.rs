//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation evaluates eagerly,
//! stores its output value, and records just enough to replay the chain rule in
//! reverse. Nodes whose inputs need no gradient are stored as constants, so a frozen
//! sub-network costs nothing on the way back.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::Tensor;
use crate::error::{config_err, usage_err, Error, Result};
use crate::scalar::Scalar;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRows { matrix: Var, row: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Act(Var, Activation),
    Affine { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeometry },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    ChannelMean(Var),
    ChannelVar { x: Var, mean: Vec<f64> },
    Normalize { x: Var, mean: Var, var: Var, eps: f64 },
    ChannelAffine { x: Var, scale: Var, shift: Var, per_sample: bool },
    ConcatCols(Vec<(Var, usize)>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    ToLocations(Var),
    AttentionPool { alpha: Var, feats: Var },
    BlendRows { a: Var, b: Var, take_a: Vec<bool> },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

/// Recorded computation for one forward pass.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    config_err(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` over every input recorded into a ReLU, or `None` without one.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act(x, Activation::Relu) => Some(self.nodes[x.index].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(usage_err("variable belongs to a different graph"));
        }
        self.nodes.get(v.index).ok_or_else(|| usage_err("dangling variable"))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("variable from this graph").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.index].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn guard(&self, vars: &[Var]) -> Result<()> {
        if self.consumed {
            return Err(usage_err("graph already consumed by backward; record a new forward pass"));
        }
        for &v in vars {
            self.check(v)?;
        }
        Ok(())
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, [Var; 2])> {
        self.guard(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::from_parts(ta.shape().to_vec(), data), [a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, inputs) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &inputs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, inputs) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &inputs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, inputs) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &inputs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.guard(&[x])?;
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        Ok(self.push(out, Op::Scale(x, factor), &[x]))
    }

    /// `matrix[n, c] + row[c]` for a `[N, C]` matrix and a `[C]` row.
    pub fn add_rows(&mut self, matrix: Var, row: Var) -> Result<Var> {
        self.guard(&[matrix, row])?;
        let (m, r) = (self.value(matrix), self.value(row));
        if m.rank() != 2 || r.rank() != 1 || m.shape()[1] != r.shape()[0] {
            return Err(shape_err("add_rows", m.shape(), r.shape()));
        }
        let cols = r.shape()[0];
        let data = m.data().iter().enumerate().map(|(i, &x)| r.data()[i % cols] + x).collect();
        let out = Tensor::from_parts(m.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRows { matrix, row }, &[matrix, row]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.guard(&[x])?;
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.guard(&[x])?;
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        Ok(self.push(out, Op::Mean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.guard(&[x])?;
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.guard(&[x])?;
        let out = self.value(x).map(|v| kind.apply(v));
        Ok(self.push(out, Op::Act(x, kind), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// `x[N,D] · w[D,M] (+ b[M])`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut vars = vec![x, w];
        vars.extend(b);
        self.guard(&vars)?;
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(shape_err("affine", tx.shape(), tw.shape()));
        }
        let (n, d, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [m] {
                return Err(shape_err("affine bias", tw.shape(), tb.shape()));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(n, d, m, tx.data(), false, tw.data(), false, &mut out, b.is_some());
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Affine { x, w, b }, &vars))
    }

    /// 2-D convolution of `x[N,C,H,W]` with `k[K,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let mut vars = vec![x, k];
        vars.extend(b);
        self.guard(&vars)?;
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 4 || tk.rank() != 4 || tx.shape()[1] != tk.shape()[1] || stride == 0 {
            return Err(shape_err("conv2d", tx.shape(), tk.shape()));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (kout, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d", tx.shape(), tk.shape()));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * kout * cols];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [kout] {
                return Err(shape_err("conv2d bias", tk.shape(), tb.shape()));
            }
            for (i, plane) in out.chunks_mut(cols).enumerate() {
                plane.fill(tb.data()[i % kout]);
            }
        }
        let mut buf = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        let sample = c * h * w;
        for s in 0..n {
            let image = &tx.data()[s * sample..(s + 1) * sample];
            let col: &[T] = if geom.is_pointwise() {
                image
            } else {
                im2col(&geom, image, &mut buf);
                &buf
            };
            let dst = &mut out[s * kout * cols..(s + 1) * kout * cols];
            gemm(kout, rows, cols, tk.data(), false, col, false, dst, b.is_some());
        }
        let out = Tensor::from_parts(vec![n, kout, geom.out_h, geom.out_w], out);
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, &vars))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.guard(&[x])?;
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(config_err(format!("softmax axis {axis} out of range for {:?}", t.shape())));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| t.data()[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (t.data()[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    fn nchw(&self, x: Var, op: &str) -> Result<[usize; 4]> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(config_err(format!("{op}: expected [N,C,H,W], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Per-channel mean and biased variance over batch and spatial axes.
    pub fn moments_over(&mut self, x: Var) -> Result<(Var, Var)> {
        self.guard(&[x])?;
        let [n, c, h, w] = self.nchw(x, "moments_over")?;
        let t = self.value(x);
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let mut mean = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &t.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[ch] = mean[ch] + plane.iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m = *m / count;
        }
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &t.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[ch] = var[ch] + plane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        for v in &mut var {
            *v = *v / count;
        }
        let saved_mean = mean.iter().map(|m| m.as_f64()).collect();
        let mean_var = self.push(Tensor::from_parts(vec![c], mean), Op::ChannelMean(x), &[x]);
        let var_var = self.push(Tensor::from_parts(vec![c], var), Op::ChannelVar { x, mean: saved_mean }, &[x]);
        Ok((mean_var, var_var))
    }

    /// `(x - mean_c) / sqrt(var_c + eps)` for `x[N,C,H,W]`.
    pub fn normalize_channels(&mut self, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        self.guard(&[x, mean, var])?;
        let [n, c, h, w] = self.nchw(x, "normalize_channels")?;
        let (tm, tv) = (self.value(mean), self.value(var));
        if tm.shape() != [c] || tv.shape() != [c] {
            return Err(shape_err("normalize_channels", self.value(x).shape(), tm.shape()));
        }
        let hw = h * w;
        let e = T::lit(eps);
        let inv: Vec<T> = tv.data().iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - tm.data()[ch]) * inv[ch]
            })
            .collect();
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        Ok(self.push(out, Op::Normalize { x, mean, var, eps }, &[x, mean, var]))
    }

    /// `scale · x + shift` per channel; `scale`/`shift` are `[C]` or per-sample `[N,C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.guard(&[x, scale, shift])?;
        let [n, c, h, w] = self.nchw(x, "channel_affine")?;
        let (ts, tb) = (self.value(scale), self.value(shift));
        if ts.shape() != tb.shape() {
            return Err(shape_err("channel_affine", ts.shape(), tb.shape()));
        }
        let per_sample = match ts.shape() {
            [cc] if *cc == c => false,
            [nn, cc] if *nn == n && *cc == c => true,
            other => return Err(shape_err("channel_affine", self.value(x).shape(), other)),
        };
        let hw = h * w;
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = if per_sample { i / hw } else { (i / hw) % c };
                ts.data()[p] * v + tb.data()[p]
            })
            .collect();
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift, per_sample }, &[x, scale, shift]))
    }

    /// Concatenate `[N, D_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.guard(parts)?;
        let first = parts.first().ok_or_else(|| config_err("concat_cols of nothing"))?;
        let n = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", self.value(*first).shape(), s));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for &(p, w) in &widths {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, total], data), Op::ConcatCols(widths), parts))
    }

    /// Columns `[start, start + len)` of a `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.guard(&[x])?;
        let s = self.value(x).shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(config_err(format!("slice_cols {start}..{} of {s:?}", start + len)));
        }
        let (n, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for row in 0..n {
            data.extend_from_slice(&src[row * d + start..row * d + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![n, len], data), Op::SliceCols { x, start }, &[x]))
    }

    /// Rows of `table[V, W]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.guard(&[table])?;
        let s = self.value(table).shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(config_err(format!("gather_rows from {s:?}")));
        }
        let (v, w) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(config_err(format!("gather_rows id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let out = Tensor::from_parts(vec![ids.len(), w], data);
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// Each row of `x[N,E]` repeated `times` times consecutively: `[N·times, E]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        self.guard(&[x])?;
        let s = self.value(x).shape();
        if s.len() != 2 || times == 0 {
            return Err(config_err(format!("repeat_rows of {s:?} x{times}")));
        }
        let (n, e) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * times * e);
        for row in 0..n {
            for _ in 0..times {
                data.extend_from_slice(&src[row * e..(row + 1) * e]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n * times, e], data), Op::RepeatRows { x, times }, &[x]))
    }

    /// `[N,C,H,W]` to one feature row per location: `[N·H·W, C]`, row `n·HW + y·W + x`.
    pub fn to_locations(&mut self, x: Var) -> Result<Var> {
        self.guard(&[x])?;
        let [n, c, h, w] = self.nchw(x, "to_locations")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * hw * c];
        for s in 0..n {
            for ch in 0..c {
                for l in 0..hw {
                    data[(s * hw + l) * c + ch] = src[(s * c + ch) * hw + l];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n * hw, c], data), Op::ToLocations(x), &[x]))
    }

    /// Attention pooling. `alpha[N,L,G]` weights over `L` locations for `G` glimpses,
    /// `feats[N·L, C]`. Output `[N, G·C]`, glimpse-major.
    pub fn attention_pool(&mut self, alpha: Var, feats: Var) -> Result<Var> {
        self.guard(&[alpha, feats])?;
        let (ta, tf) = (self.value(alpha), self.value(feats));
        if ta.rank() != 3 || tf.rank() != 2 || ta.shape()[0] * ta.shape()[1] != tf.shape()[0] {
            return Err(shape_err("attention_pool", ta.shape(), tf.shape()));
        }
        let (n, l, g) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let c = tf.shape()[1];
        let mut out = vec![T::zero(); n * g * c];
        for s in 0..n {
            for loc in 0..l {
                let f = &tf.data()[(s * l + loc) * c..(s * l + loc + 1) * c];
                for gl in 0..g {
                    let a = ta.data()[(s * l + loc) * g + gl];
                    let dst = &mut out[(s * g + gl) * c..(s * g + gl + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(f) {
                        *o = *o + a * v;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, g * c], out);
        Ok(self.push(out, Op::AttentionPool { alpha, feats }, &[alpha, feats]))
    }

    /// Row `r` of the output is row `r` of `a` where `take_a[r]`, else row `r` of `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let (_, _) = self.binary(a, b, "blend_rows", |x, _| x)?;
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || s[0] != take_a.len() {
            return Err(config_err(format!("blend_rows mask of {} rows for {s:?}", take_a.len())));
        }
        let d = s[1];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ta.len());
        for (row, &keep) in take_a.iter().enumerate() {
            let src = if keep { ta } else { tb };
            data.extend_from_slice(&src[row * d..(row + 1) * d]);
        }
        let out = Tensor::from_parts(s, data);
        Ok(self.push(out, Op::BlendRows { a, b, take_a: take_a.to_vec() }, &[a, b]))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.guard(&[x])?;
        let [n, c, h, w] = self.nchw(x, "avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(config_err(format!("avg_pool2 on spatial size {h}x{w}")));
        }
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = p[2 * y * w + 2 * xx]
                        + p[2 * y * w + 2 * xx + 1]
                        + p[(2 * y + 1) * w + 2 * xx]
                        + p[(2 * y + 1) * w + 2 * xx + 1];
                    data.push(s * quarter);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], data), Op::AvgPool2(x), &[x]))
    }

    /// Spatial mean: `[N,C,H,W]` to `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.guard(&[x])?;
        let [n, c, h, w] = self.nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let count = T::lit(hw as f64);
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / count).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::GlobalAvgPool(x), &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.guard(&[logits])?;
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(config_err(format!("cross_entropy: logits {:?} vs {} targets", t.shape(), targets.len())));
        }
        let k = t.shape()[1];
        if let Some(bad) = targets.iter().find(|&&y| y >= k) {
            return Err(usage_err(format!("cross_entropy target {bad} out of range for {k} classes")));
        }
        let mut total = T::zero();
        for (row, &y) in t.data().chunks(k).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[y]);
        }
        let out = Tensor::scalar(total / T::lit(targets.len() as f64));
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(usage_err("backward called twice on the same graph"));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(usage_err(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.index].requires_grad {
            grads[loss.index] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { graph: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.index].value.data();
        let shape = |v: Var| nodes[v.index].value.shape();
        // Accumulate into the gradient buffer of `v` when it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.index].requires_grad {
                return;
            }
            let slot = grads[v.index].get_or_insert_with(|| vec![T::zero(); nodes[v.index].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = T::lit(*f);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * f));
            }
            Op::AddRows { matrix, row } => {
                let cols = shape(*row)[0];
                acc(*matrix, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g));
                acc(*row, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[i % cols] = d[i % cols] + gv;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let share = g[0] / T::lit(nodes[x.index].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + share));
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g)),
            Op::Act(x, kind) => {
                let (vx, vy) = (val(*x), node.value.data());
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * kind.derivative(vx[i], vy[i]);
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (n, dd) = (shape(*x)[0], shape(*x)[1]);
                let m = shape(*w)[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| gemm(n, m, dd, g, false, vw, true, d, true));
                acc(*w, &mut |d| gemm(dd, n, m, vx, true, g, false, d, true));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(m) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let n = shape(*x)[0];
                let kout = shape(*k)[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let sample = geom.channels * geom.height * geom.width;
                let (vx, vk) = (val(*x), val(*k));
                let mut buf = vec![T::zero(); rows * cols];
                acc(*k, &mut |d| {
                    for s in 0..n {
                        let image = &vx[s * sample..(s + 1) * sample];
                        let col: &[T] = if geom.is_pointwise() {
                            image
                        } else {
                            im2col(geom, image, &mut buf);
                            &buf
                        };
                        let gs = &g[s * kout * cols..(s + 1) * kout * cols];
                        gemm(kout, cols, rows, gs, false, col, true, d, true);
                    }
                });
                acc(*x, &mut |d| {
                    for s in 0..n {
                        let gs = &g[s * kout * cols..(s + 1) * kout * cols];
                        let dst = &mut d[s * sample..(s + 1) * sample];
                        if geom.is_pointwise() {
                            gemm(rows, kout, cols, vk, true, gs, false, dst, true);
                        } else {
                            gemm(rows, kout, cols, vk, true, gs, false, &mut buf, false);
                            col2im(geom, &buf, dst);
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for (i, plane) in g.chunks(cols).enumerate() {
                            d[i % kout] = d[i % kout] + plane.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                d[at(j)] = d[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let s = shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let count = T::lit((s[0] * hw) as f64);
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + g[(i / hw) % c] / count;
                    }
                });
            }
            Op::ChannelVar { x, mean } => {
                let s = shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let two_over = T::lit(2.0 / (s[0] * hw) as f64);
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        let ch = (i / hw) % c;
                        *dv = *dv + g[ch] * two_over * (vx[i] - T::lit(mean[ch]));
                    }
                });
            }
            Op::Normalize { x, mean, var, eps } => {
                let s = shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let (vx, vm, vv) = (val(*x), val(*mean), val(*var));
                let e = T::lit(*eps);
                let inv: Vec<T> = vv.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + g[i] * inv[(i / hw) % c];
                    }
                });
                acc(*mean, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / hw) % c;
                        d[ch] = d[ch] - gv * inv[ch];
                    }
                });
                let half = T::lit(-0.5);
                acc(*var, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / hw) % c;
                        d[ch] = d[ch] + gv * (vx[i] - vm[ch]) * half * inv[ch] * inv[ch] * inv[ch];
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift, per_sample } => {
                let s = shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let param = |i: usize| if *per_sample { i / hw } else { (i / hw) % c };
                let (vx, vs) = (val(*x), val(*scale));
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + g[i] * vs[param(i)];
                    }
                });
                acc(*scale, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[param(i)] = d[param(i)] + gv * vx[i];
                    }
                });
                acc(*shift, &mut |d| {
                    for (i, &gv) in g.iter().enumerate() {
                        d[param(i)] = d[param(i)] + gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for (row, dst) in d.chunks_mut(w).enumerate() {
                            let src = &g[row * total + offset..row * total + offset + w];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let dcols = shape(*x)[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (row, src) in g.chunks(len).enumerate() {
                        let dst = &mut d[row * dcols + start..row * dcols + start + len];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let w = shape(*table)[1];
                acc(*table, &mut |d| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * w..(id + 1) * w];
                        dst.iter_mut().zip(&g[row * w..(row + 1) * w]).for_each(|(d, &g)| *d = *d + g);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let e = shape(*x)[1];
                acc(*x, &mut |d| {
                    for (row, src) in g.chunks(e).enumerate() {
                        let dst = &mut d[(row / times) * e..(row / times + 1) * e];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                });
            }
            Op::ToLocations(x) => {
                let s = shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                acc(*x, &mut |d| {
                    for smp in 0..n {
                        for ch in 0..c {
                            for l in 0..hw {
                                let i = (smp * c + ch) * hw + l;
                                d[i] = d[i] + g[(smp * hw + l) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::AttentionPool { alpha, feats } => {
                let sa = shape(*alpha);
                let (n, l, gl) = (sa[0], sa[1], sa[2]);
                let c = shape(*feats)[1];
                let (va, vf) = (val(*alpha), val(*feats));
                acc(*alpha, &mut |d| {
                    for s in 0..n {
                        for loc in 0..l {
                            let f = &vf[(s * l + loc) * c..(s * l + loc + 1) * c];
                            for k in 0..gl {
                                let go = &g[(s * gl + k) * c..(s * gl + k + 1) * c];
                                let dot: T = f.iter().zip(go).map(|(&a, &b)| a * b).sum();
                                let i = (s * l + loc) * gl + k;
                                d[i] = d[i] + dot;
                            }
                        }
                    }
                });
                acc(*feats, &mut |d| {
                    for s in 0..n {
                        for loc in 0..l {
                            let dst = &mut d[(s * l + loc) * c..(s * l + loc + 1) * c];
                            for k in 0..gl {
                                let a = va[(s * l + loc) * gl + k];
                                let go = &g[(s * gl + k) * c..(s * gl + k + 1) * c];
                                dst.iter_mut().zip(go).for_each(|(d, &g)| *d = *d + a * g);
                            }
                        }
                    }
                });
            }
            Op::BlendRows { a, b, take_a } => {
                let w = shape(*a)[1];
                for (v, want) in [(*a, true), (*b, false)] {
                    acc(v, &mut |d| {
                        for (row, &keep) in take_a.iter().enumerate() {
                            if keep == want {
                                let dst = &mut d[row * w..(row + 1) * w];
                                dst.iter_mut().zip(&g[row * w..(row + 1) * w]).for_each(|(d, &g)| *d = *d + g);
                            }
                        }
                    });
                }
            }
            Op::AvgPool2(x) => {
                let s = shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                acc(*x, &mut |d| {
                    for plane in 0..s[0] * s[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = g[(plane * oh + y) * ow + xx] * quarter;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let i = plane * h * w + (2 * y + dy) * w + 2 * xx + dx;
                                    d[i] = d[i] + gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = shape(*x);
                let hw = s[2] * s[3];
                let count = T::lit(hw as f64);
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + g[i / hw] / count;
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let k = shape(*logits)[1];
                let vl = val(*logits);
                let scale = g[0] / T::lit(targets.len() as f64);
                acc(*logits, &mut |d| {
                    for (row, &y) in targets.iter().enumerate() {
                        let r = &vl[row * k..(row + 1) * k];
                        let max = r.iter().copied().fold(T::neg_infinity(), T::max);
                        let total: T = r.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..k {
                            let p = (r[j] - max).exp() / total;
                            let onehot = if j == y { T::one() } else { T::zero() };
                            d[row * k + j] = d[row * k + j] + scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}
