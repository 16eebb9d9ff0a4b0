//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Layer normalisation over the channel axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add_constant(format!("{name}.gain"), &[dim], 1.0)?;
        let bias = store.add_constant(format!("{name}.bias"), &[dim], 0.0)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product attention with learned input and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`MultiHeadAttention::forward_with_weights`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[B, T_q, C]`.
    pub output: Var,
    /// `[B, heads, T_q, T_k]`, rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("channels {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, q, k, v, None)?.output)
    }

    /// `mask` is added to the attention logits before the softmax; its shape
    /// is `[T_q, T_k]` or `[B, T_q, T_k]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
    ) -> Result<Attended> {
        let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                detail: format!("query {qs:?} and key {ks:?} must be [B, T, {}]", self.dim),
            });
        }
        if g.shape(v) != ks.as_slice() {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                detail: format!("value {:?} must match key {ks:?}", g.shape(v)),
            });
        }
        let (b, tq, tk, h, d) = (qs[0], qs[1], ks[1], self.heads, self.head_dim());
        let split = |g: &mut Graph, x: Var, t: usize, axes: &[usize]| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, d])?;
            g.permute(x, axes)
        };
        let qp = self.q.forward(g, store, q)?;
        let kp = self.k.forward(g, store, k)?;
        let vp = self.v.forward(g, store, v)?;
        let qh = split(g, qp, tq, &[0, 2, 1, 3])?;
        let kt = split(g, kp, tk, &[0, 2, 3, 1])?;
        let vh = split(g, vp, tk, &[0, 2, 1, 3])?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(mask) = mask {
            let full = expand_mask(mask, b, h, tq, tk)?;
            let m = g.constant(full);
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, vh)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.dim])?;
        let output = self.out.forward(g, store, ctx)?;
        Ok(Attended { output, weights })
    }
}

fn expand_mask(mask: &Tensor, b: usize, h: usize, tq: usize, tk: usize) -> Result<Tensor> {
    let per_batch = match mask.shape() {
        [q, k] if *q == tq && *k == tk => false,
        [bb, q, k] if *bb == b && *q == tq && *k == tk => true,
        s => {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                detail: format!("mask {s:?} must be [{tq}, {tk}] or [{b}, {tq}, {tk}]"),
            })
        }
    };
    let block = tq * tk;
    let src = mask.data();
    let mut data = Vec::with_capacity(b * h * block);
    for n in 0..b {
        let m = if per_batch { &src[n * block..(n + 1) * block] } else { src };
        for _ in 0..h {
            data.extend_from_slice(m);
        }
    }
    Tensor::new(vec![b, h, tq, tk], data)
}

/// 2-D convolution over `[B, H, W, C_in]` with an odd `kh × kw` kernel and
/// "same" zero padding, so the spatial size is preserved.
#[derive(Debug, Clone)]
pub struct SameConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: (usize, usize),
}

impl SameConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: (usize, usize),
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(TensorError::Config(format!("same-padded kernel {kernel:?} must be odd in both axes")));
        }
        let fan_in = kernel.0 * kernel.1 * c_in;
        let weight = store.add_uniform(format!("{name}.weight"), &[kernel.0, kernel.1, c_in, c_out], fan_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng)?;
        Ok(SameConv2d { weight, bias, kernel })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), (1, 1), (self.kernel.0 / 2, self.kernel.1 / 2))
    }
}
