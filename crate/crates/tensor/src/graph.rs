//! Operation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in insertion order. Nodes can
//! only consume earlier nodes, so the record is acyclic and [`Graph::backward`]
//! is a single sweep in reverse insertion order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_acc, transpose, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Box<MatMulPlan>),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Repeat { x: Var, times: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize, c_out: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    MeanPool2d { x: Var },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    ConvTranspose1d { x: Var, w: Var, b: Var, stride: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct MatMulPlan {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    /// Per output batch: (batch index into a, batch index into b).
    pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix shared by every batch of `a`.
    shared_rhs: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    /// Graph that records gradients for tensors marked as requiring them.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, params: HashMap::new() }
    }

    /// Graph for inference: nothing requires gradients, backward is refused.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, params: HashMap::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients flow to it when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = self.grad_enabled && tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push_with(value, Op::Leaf, rg)
    }

    /// Records a constant input that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push_with(value, Op::Leaf, false)
    }

    /// Brings a parameter into the graph. Repeated calls for the same id
    /// return the same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let rg = self.grad_enabled && t.requires_grad();
        let v = self.push_with(value, Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return Err(TensorError::mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, b);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] → [..., m, n]` with
    /// numpy-style broadcasting over the leading batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape("matmul", format!("operands must be at least 2-D, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let mut batch = vec![0; rank];
        for i in 0..rank {
            let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
            let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
            batch[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(TensorError::mismatch("matmul", &sa, &sb)),
            };
        }
        let nbatch: usize = batch.iter().product();
        let shared_rhs = bb.iter().product::<usize>() == 1;
        let mut pairs = Vec::with_capacity(nbatch);
        let sa_strides = strides(ba);
        let sb_strides = strides(bb);
        let mut idx = vec![0usize; rank];
        for _ in 0..nbatch {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if d + ba.len() >= rank {
                    let j = d + ba.len() - rank;
                    if ba[j] != 1 {
                        ia += idx[d] * sa_strides[j];
                    }
                }
                if d + bb.len() >= rank {
                    let j = d + bb.len() - rank;
                    if bb[j] != 1 {
                        ib += idx[d] * sb_strides[j];
                    }
                }
            }
            pairs.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; nbatch * m * n];
        let contiguous_a = pairs.iter().enumerate().all(|(i, &(ia, _))| ia == i);
        if shared_rhs && contiguous_a {
            gemm_acc(nbatch * m, n, k, ad, bd, &mut out);
        } else {
            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                gemm_acc(
                    m,
                    n,
                    k,
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let plan = MatMulPlan { a, b, m, k, n, pairs, shared_rhs: shared_rhs && contiguous_a };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(Box::new(plan)), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(TensorError::mismatch("reshape", self.shape(x), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::shape("permute", format!("invalid axes {axes:?} for shape {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, axes);
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::shape("transpose_last", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("pad", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let total = before + n + after;
        let src = self.data(x);
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(value, Op::Pad { x, axis, before }, &[x]))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(TensorError::shape("repeat", "times must be at least 1"));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Repeat { x, times }, &[x]))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| TensorError::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} must be [{c}]", self.shape(gain), self.shape(bias)),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / c.max(1);
        let mut normed = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                normed[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, normed, rstd }, &[x, gain, bias]))
    }

    /// 2-D cross-correlation over NHWC input `[B, H, W, C_in]` with kernel
    /// `[kh, kw, C_in, C_out]`, explicit stride and symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] {
            return Err(TensorError::mismatch("conv2d", &xs, &ws));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        if xs[1] + 2 * padding.0 < ws[0] || xs[2] + 2 * padding.1 < ws[1] {
            return Err(TensorError::shape("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let c_out = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(TensorError::mismatch("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            height: xs[1],
            width: xs[2],
            c_in: xs[3],
            kernel: (ws[0], ws[1]),
            stride,
            padding,
        };
        let (oh, ow, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let batch = xs[0];
        let in_len = xs[1] * xs[2] * xs[3];
        let out_len = oh * ow * c_out;
        let mut out = vec![0.0; batch * out_len];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bd);
            }
        }
        let mut col = vec![0.0; oh * ow * plen];
        let (xd, wd) = (self.data(x), self.data(w));
        for n in 0..batch {
            geom.im2col(&xd[n * in_len..(n + 1) * in_len], &mut col);
            gemm_acc(oh * ow, c_out, plen, &col, wd, &mut out[n * out_len..(n + 1) * out_len]);
        }
        let value = Tensor::from_parts(vec![batch, oh, ow, c_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, batch, c_out }, &inputs))
    }

    /// Max pooling over `[B, H, W, C]` without padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] < kernel.0 || xs[2] < kernel.1 || stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::shape("max_pool2d", format!("input {xs:?} kernel {kernel:?} stride {stride:?}")));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel.0) / stride.0 + 1;
        let ow = (w - kernel.1) / stride.1 + 1;
        let src = self.data(x);
        let mut out = vec![0.0; b * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((n * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                let i = ((n * h + oy * stride.0 + ky) * w + ox * stride.1 + kx) * c + ch;
                                if src[i] > best {
                                    best = src[i];
                                    at = i;
                                }
                            }
                        }
                        out[o + ch] = best;
                        argmax[o + ch] = at;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, oh, ow, c], out);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Global average over the two spatial axes: `[B, H, W, C] → [B, C]`.
    pub fn mean_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::shape("mean_pool2d", format!("expected [B,H,W,C], got {xs:?}")));
        }
        let (b, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let src = self.data(x);
        let mut out = vec![0.0; b * c];
        for n in 0..b {
            let dst = &mut out[n * c..(n + 1) * c];
            for p in 0..hw {
                add_into(dst, &src[(n * hw + p) * c..(n * hw + p + 1) * c]);
            }
            dst.iter_mut().for_each(|v| *v /= hw as f64);
        }
        let value = Tensor::from_parts(vec![b, c], out);
        Ok(self.push(value, Op::MeanPool2d { x }, &[x]))
    }

    /// Per-channel temporal convolution over `[B, T, C]` with an odd kernel
    /// `[K, C]` and same zero padding.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[2] || self.shape(b) != [xs[2]] {
            return Err(TensorError::mismatch("depthwise_conv1d", &xs, &ws));
        }
        if ws[0] % 2 == 0 {
            return Err(TensorError::Config(format!("depthwise_conv1d kernel must be odd, got {}", ws[0])));
        }
        let (bsz, t, c, k) = (xs[0], xs[1], xs[2], ws[0]);
        let pad = k / 2;
        let (src, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; src.len()];
        for n in 0..bsz {
            for i in 0..t {
                let dst = &mut out[(n * t + i) * c..(n * t + i + 1) * c];
                dst.copy_from_slice(bd);
                for j in 0..k {
                    let s = i as isize + j as isize - pad as isize;
                    if s < 0 || s >= t as isize {
                        continue;
                    }
                    let row = &src[(n * t + s as usize) * c..(n * t + s as usize + 1) * c];
                    let wr = &wd[j * c..(j + 1) * c];
                    for ch in 0..c {
                        dst[ch] += row[ch] * wr[ch];
                    }
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        Ok(self.push(value, Op::DepthwiseConv1d { x, w, b }, &[x, w, b]))
    }

    /// Transposed temporal convolution `[B, T, C_in] → [B, T·stride, C_out]`
    /// with kernel `[K, C_in, C_out]`. Input frame `i` writes taps
    /// `i·stride + j`; taps past the output end are cropped.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || self.shape(b) != [ws[2]] {
            return Err(TensorError::mismatch("conv_transpose1d", &xs, &ws));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv_transpose1d stride must be at least 1".into()));
        }
        let (bsz, t, c_in, k, c_out) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let t_out = t * stride;
        let (src, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; bsz * t_out * c_out];
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(bd);
        }
        // taps[j] holds x · w[j] for every input frame.
        let mut taps = vec![vec![0.0; bsz * t * c_out]; k];
        for (j, tap) in taps.iter_mut().enumerate() {
            gemm_acc(bsz * t, c_out, c_in, src, &wd[j * c_in * c_out..(j + 1) * c_in * c_out], tap);
        }
        for n in 0..bsz {
            for i in 0..t {
                for (j, tap) in taps.iter().enumerate() {
                    let o = i * stride + j;
                    if o >= t_out {
                        continue;
                    }
                    let dst = &mut out[(n * t_out + o) * c_out..(n * t_out + o + 1) * c_out];
                    add_into(dst, &tap[(n * t + i) * c_out..(n * t + i + 1) * c_out]);
                }
            }
        }
        let value = Tensor::from_parts(vec![bsz, t_out, c_out], out);
        Ok(self.push(value, Op::ConvTranspose1d { x, w, b, stride }, &[x, w, b]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits: [T, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {s:?} against {} labels", labels.len()),
            ));
        }
        let (t, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Data(format!("label {bad} outside [0, {k})")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; t * k];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[y];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / t as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(TensorError::Usage("backward called on an inference graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                params.push((id, g));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<f64>| match grads[v.0].as_mut() {
            Some(existing) => add_into(existing, &contrib),
            None => grads[v.0] = Some(contrib),
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let c = self.data(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        add_into(&mut gb, row);
                    }
                    acc(*b, gb);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, g.iter().zip(xd).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.data(*x).len()]),
            Op::Mean(x) => {
                let n = self.data(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MatMul(plan) => {
                let (a, b) = self.matmul_backward(plan, g);
                if let Some(ga) = a {
                    acc(plan.a, ga);
                }
                if let Some(gb) = b {
                    acc(plan.b, gb);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, data) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, data);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = outer_inner(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        acc(v, gv);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = outer_inner(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.data(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Pad { x, axis, before } => {
                let (outer, n, inner) = outer_inner(self.shape(*x), *axis);
                let total = node.value.shape()[*axis];
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = (o * total + before) * inner;
                    gx.extend_from_slice(&g[src..src + n * inner]);
                }
                acc(*x, gx);
            }
            Op::Repeat { x, times } => {
                let n = self.data(*x).len();
                let mut gx = vec![0.0; n];
                for r in 0..*times {
                    add_into(&mut gx, &g[r * n..(r + 1) * n]);
                }
                acc(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, normed, rstd } => {
                let c = self.data(*gain).len();
                let gd = self.data(*gain);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for (grow, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * nrow[j];
                            gb[j] += grow[j];
                        }
                    }
                    if self.wants(*gain) {
                        acc(*gain, gg);
                    }
                    if self.wants(*bias) {
                        acc(*bias, gb);
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let mut dxh = vec![0.0; c];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let nrow = &normed[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = grow[j] * gd[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rs * (dxh[j] - m1 - nrow[j] * m2);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Conv2d { x, w, b, geom, batch, c_out } => {
                let (oh, ow, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
                let out_len = oh * ow * c_out;
                let in_len = geom.height * geom.width * geom.c_in;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; *c_out];
                        for row in g.chunks(*c_out) {
                            add_into(&mut gb, row);
                        }
                        acc(*b, gb);
                    }
                }
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                if want_x || want_w {
                    let xd = self.data(*x);
                    let wd = self.data(*w);
                    let wt = if want_x { transpose(plen, *c_out, wd) } else { Vec::new() };
                    let mut gw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
                    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                    let mut col = vec![0.0; oh * ow * plen];
                    for n in 0..*batch {
                        let gn = &g[n * out_len..(n + 1) * out_len];
                        if want_w {
                            geom.im2col(&xd[n * in_len..(n + 1) * in_len], &mut col);
                            let colt = transpose(oh * ow, plen, &col);
                            gemm_acc(plen, *c_out, oh * ow, &colt, gn, &mut gw);
                        }
                        if want_x {
                            col.iter_mut().for_each(|v| *v = 0.0);
                            gemm_acc(oh * ow, plen, *c_out, gn, &wt, &mut col);
                            geom.col2im_add(&col, &mut gx[n * in_len..(n + 1) * in_len]);
                        }
                    }
                    if want_w {
                        acc(*w, gw);
                    }
                    if want_x {
                        acc(*x, gx);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.data(*x).len()];
                for (gv, &at) in g.iter().zip(argmax) {
                    gx[at] += gv;
                }
                acc(*x, gx);
            }
            Op::MeanPool2d { x } => {
                let xs = self.shape(*x);
                let (b, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
                let mut gx = vec![0.0; b * hw * c];
                for n in 0..b {
                    for p in 0..hw {
                        for ch in 0..c {
                            gx[(n * hw + p) * c + ch] = g[n * c + ch] / hw as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, t, c) = (xs[0], xs[1], xs[2]);
                let k = self.shape(*w)[0];
                let pad = k / 2;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; c];
                for n in 0..bsz {
                    for i in 0..t {
                        let grow = &g[(n * t + i) * c..(n * t + i + 1) * c];
                        add_into(&mut gb, grow);
                        for j in 0..k {
                            let s = i as isize + j as isize - pad as isize;
                            if s < 0 || s >= t as isize {
                                continue;
                            }
                            let base = (n * t + s as usize) * c;
                            for ch in 0..c {
                                gx[base + ch] += grow[ch] * wd[j * c + ch];
                                gw[j * c + ch] += grow[ch] * xd[base + ch];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    acc(*w, gw);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::ConvTranspose1d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (bsz, t, c_in, k, c_out) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
                let t_out = t * stride;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if self.wants(*b) {
                    let mut gb = vec![0.0; c_out];
                    for row in g.chunks(c_out) {
                        add_into(&mut gb, row);
                    }
                    acc(*b, gb);
                }
                // Gather per-tap output gradients: gtap[j][n, i] = g[n, i·stride + j].
                let mut gtaps = vec![vec![0.0; bsz * t * c_out]; k];
                for (j, gt) in gtaps.iter_mut().enumerate() {
                    for n in 0..bsz {
                        for i in 0..t {
                            let o = i * stride + j;
                            if o < t_out {
                                gt[(n * t + i) * c_out..(n * t + i + 1) * c_out]
                                    .copy_from_slice(&g[(n * t_out + o) * c_out..(n * t_out + o + 1) * c_out]);
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let xt = transpose(bsz * t, c_in, xd);
                    let mut gw = vec![0.0; wd.len()];
                    for (j, gt) in gtaps.iter().enumerate() {
                        gemm_acc(c_in, c_out, bsz * t, &xt, gt, &mut gw[j * c_in * c_out..(j + 1) * c_in * c_out]);
                    }
                    acc(*w, gw);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for (j, gt) in gtaps.iter().enumerate() {
                        let wt = transpose(c_in, c_out, &wd[j * c_in * c_out..(j + 1) * c_in * c_out]);
                        gemm_acc(bsz * t, c_in, c_out, gt, &wt, &mut gx);
                    }
                    acc(*x, gx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let t = labels.len() as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= g[0] / t);
                acc(*logits, gl);
            }
        }
    }

    fn matmul_backward(&self, p: &MatMulPlan, g: &[f64]) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (m, k, n) = (p.m, p.k, p.n);
        let ad = self.data(p.a);
        let bd = self.data(p.b);
        let want_a = self.wants(p.a);
        let want_b = self.wants(p.b);
        if p.shared_rhs {
            let rows = p.pairs.len() * m;
            let ga = want_a.then(|| {
                let bt = transpose(k, n, bd);
                let mut ga = vec![0.0; ad.len()];
                gemm_acc(rows, k, n, g, &bt, &mut ga);
                ga
            });
            let gb = want_b.then(|| {
                let at = transpose(rows, k, ad);
                let mut gb = vec![0.0; bd.len()];
                gemm_acc(k, n, rows, &at, g, &mut gb);
                gb
            });
            return (ga, gb);
        }
        let mut ga = want_a.then(|| vec![0.0; ad.len()]);
        let mut gb = want_b.then(|| vec![0.0; bd.len()]);
        for (i, &(ia, ib)) in p.pairs.iter().enumerate() {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let a_i = &ad[ia * m * k..(ia + 1) * m * k];
            let b_i = &bd[ib * k * n..(ib + 1) * k * n];
            if let Some(ga) = ga.as_mut() {
                let bt = transpose(k, n, b_i);
                gemm_acc(m, k, n, gi, &bt, &mut ga[ia * m * k..(ia + 1) * m * k]);
            }
            if let Some(gb) = gb.as_mut() {
                let at = transpose(m, k, a_i);
                gemm_acc(k, n, m, &at, gi, &mut gb[ib * k * n..(ib + 1) * k * n]);
            }
        }
        (ga, gb)
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return (out_shape, out);
    }
    if rank == 0 {
        return (out_shape, src.to_vec());
    }
    // The innermost output axis is copied as a run when it is also innermost
    // in the input.
    let run = if axes[rank - 1] == rank - 1 { shape[rank - 1] } else { 1 };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let step: Vec<usize> = axes[..outer_rank].iter().map(|&a| in_strides[a]).collect();
    let dims = &out_shape[..outer_rank];
    let mut idx = vec![0usize; outer_rank];
    let mut offset = 0usize;
    let total: usize = dims.iter().product();
    for _ in 0..total {
        if run > 1 {
            out.extend_from_slice(&src[offset..offset + run]);
        } else {
            out.push(src[offset]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < dims[d] {
                break;
            }
            offset -= step[d] * dims[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Result of [`Graph::backward`]: gradients of leaves and parameters.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf recorded with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds parameter gradients into the store. Nothing is zeroed first.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}
