//! Long-short context modelling: per-speaker temporal attention (self and
//! audio-visual cross) followed by short-range inter-speaker mixing, repeated
//! over N blocks with a shared frame classifier after every block.

use loconet_tensor::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use loconet_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Additive attention bias that removes a key from the softmax.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Convolution,
    WindowAttention,
}

impl std::str::FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convolution" | "conv" => Ok(SimKind::Convolution),
            "window_attention" | "window" => Ok(SimKind::WindowAttention),
            _ => Err(Error::Config(format!("unknown sim_kind `{s}` (convolution | window_attention)"))),
        }
    }
}

impl std::fmt::Display for SimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimKind::Convolution => "convolution",
            SimKind::WindowAttention => "window_attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LscmConfig {
    pub blocks: usize,
    pub speakers: usize,
    pub channels: usize,
    pub heads: usize,
    /// Temporal kernel of the inter-speaker module.
    pub k: usize,
    /// Speaker kernel of the inter-speaker convolution.
    pub s: usize,
    pub sim_kind: SimKind,
    pub use_lim: bool,
    pub use_sim: bool,
    pub positional_encoding: bool,
    pub mlp_ratio: usize,
}

impl LscmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel k = {} must be odd", self.k)));
        }
        if self.s % 2 == 0 || self.s > self.speakers.max(1) {
            return Err(Error::Config(format!(
                "speaker kernel s = {} must be odd and at most S = {}",
                self.s, self.speakers
            )));
        }
        if self.speakers == 0 || self.channels == 0 {
            return Err(Error::Config("S and C must be positive".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!("C = {} not divisible by {} heads", self.channels, self.heads)));
        }
        Ok(())
    }

    /// Largest odd speaker kernel not exceeding `min(s, S)`.
    pub fn fit_speaker_kernel(s: usize, speakers: usize) -> usize {
        let m = s.min(speakers).max(1);
        if m % 2 == 0 {
            m - 1
        } else {
            m
        }
    }
}

/// Post-norm transformer layer: `h = LN(MHA(q, kv, kv) + q)`,
/// `out = LN(MLP(h) + h)`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub mha: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub mlp: Mlp,
    pub ln2: LayerNorm,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, heads: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(AttentionLayer {
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), c, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, ratio * c, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c)?,
        })
    }

    /// `q, kv: [S, T, C]`; attention runs along T separately for each speaker.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        let a = self.mha.forward(g, store, q, kv, kv)?;
        let h = g.add(a, q)?;
        let h = self.ln1.forward(g, store, h)?;
        let m = self.mlp.forward(g, store, h)?;
        let o = g.add(m, h)?;
        Ok(self.ln2.forward(g, store, o)?)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for id in [self.mha.out.weight, self.mha.out.bias, self.mlp.fc2.weight, self.mlp.fc2.bias] {
            zero(store, id);
        }
    }
}

fn zero(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Inter-speaker mixing over the speaker × time grid:
/// `out = MLP(LN(Mix(û))) + û`.
#[derive(Debug, Clone)]
pub struct Sim {
    pub kind: SimKind,
    pub k: usize,
    pub s: usize,
    pub conv_weight: Option<ParamId>,
    pub conv_bias: Option<ParamId>,
    pub attention: Option<MultiHeadAttention>,
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl Sim {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &LscmConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let (mut conv_weight, mut conv_bias, mut attention) = (None, None, None);
        match cfg.sim_kind {
            SimKind::Convolution => {
                let fan_in = cfg.s * cfg.k * c;
                conv_weight = Some(store.add_uniform(format!("{name}.conv.weight"), &[cfg.s, cfg.k, c, c], fan_in, rng)?);
                conv_bias = Some(store.add_uniform(format!("{name}.conv.bias"), &[c], fan_in, rng)?);
            }
            SimKind::WindowAttention => {
                attention = Some(MultiHeadAttention::new(store, &format!("{name}.attn"), c, cfg.heads, rng)?);
            }
        }
        Ok(Sim {
            kind: cfg.sim_kind,
            k: cfg.k,
            s: cfg.s,
            conv_weight,
            conv_bias,
            attention,
            ln: LayerNorm::new(store, &format!("{name}.ln"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), c, cfg.mlp_ratio * c, rng)?,
        })
    }

    /// `[S, T, C] → [S, T, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let mixed = match self.kind {
            SimKind::Convolution => self.mix_conv(g, store, u)?,
            SimKind::WindowAttention => self.mix_window(g, store, u)?,
        };
        let h = self.ln.forward(g, store, mixed)?;
        let h = self.mlp.forward(g, store, h)?;
        Ok(g.add(h, u)?)
    }

    fn mix_conv(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let shape = g.shape(u).to_vec();
        let grid = g.reshape(u, &[1, shape[0], shape[1], shape[2]])?;
        let w = g.param(store, self.conv_weight.expect("conv parameters"));
        let b = g.param(store, self.conv_bias.expect("conv parameters"));
        let y = g.conv2d(grid, w, Some(b), (1, 1), (self.s / 2, self.k / 2))?;
        Ok(g.reshape(y, &shape)?)
    }

    /// Self-attention inside non-overlapping windows of `k` frames spanning
    /// every speaker. Frames past the end are zero padding and masked as keys.
    fn mix_window(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let mha = self.attention.as_ref().expect("attention parameters");
        let shape = g.shape(u).to_vec();
        let (s, t, c, k) = (shape[0], shape[1], shape[2], self.k);
        let windows = t.div_ceil(k);
        let padded_t = windows * k;
        let x = if padded_t > t { g.pad(u, 1, 0, padded_t - t)? } else { u };
        let x = g.reshape(x, &[s, windows, k, c])?;
        let x = g.permute(x, &[1, 0, 2, 3])?;
        let tokens = s * k;
        let x = g.reshape(x, &[windows, tokens, c])?;
        let mut mask = vec![0.0; windows * tokens * tokens];
        for w in 0..windows {
            for key in 0..tokens {
                if w * k + key % k >= t {
                    for q in 0..tokens {
                        mask[(w * tokens + q) * tokens + key] = MASKED;
                    }
                }
            }
        }
        let mask = Tensor::new(vec![windows, tokens, tokens], mask)?;
        let att = mha.forward_with_weights(g, store, x, x, x, Some(&mask))?;
        let y = g.reshape(att.output, &[windows, s, k, c])?;
        let y = g.permute(y, &[1, 0, 2, 3])?;
        let y = g.reshape(y, &[s, padded_t, c])?;
        if padded_t > t {
            Ok(g.narrow(y, 1, 0, t)?)
        } else {
            Ok(y)
        }
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        if let (Some(w), Some(b)) = (self.conv_weight, self.conv_bias) {
            zero(store, w);
            zero(store, b);
        }
        if let Some(a) = &self.attention {
            zero(store, a.out.weight);
            zero(store, a.out.bias);
        }
        zero(store, self.mlp.fc2.weight);
        zero(store, self.mlp.fc2.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LscmBlock {
    pub self_v: Option<AttentionLayer>,
    pub self_a: Option<AttentionLayer>,
    pub cross_v: Option<AttentionLayer>,
    pub cross_a: Option<AttentionLayer>,
    pub sim_v: Option<Sim>,
    pub sim_a: Option<Sim>,
}

/// Streams after a block, plus intermediate states for inspection.
#[derive(Debug, Clone, Copy)]
pub struct StreamState {
    pub u_v: Var,
    pub u_a: Var,
}

impl LscmBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &LscmConfig, rng: &mut impl Rng) -> Result<Self> {
        let (c, h, r) = (cfg.channels, cfg.heads, cfg.mlp_ratio);
        let mut layer = |n: &str, store: &mut ParamStore| -> Result<Option<AttentionLayer>> {
            if cfg.use_lim {
                Ok(Some(AttentionLayer::new(store, &format!("{name}.{n}"), c, h, r, rng)?))
            } else {
                Ok(None)
            }
        };
        let self_v = layer("self_v", store)?;
        let self_a = layer("self_a", store)?;
        let cross_v = layer("cross_v", store)?;
        let cross_a = layer("cross_a", store)?;
        let (sim_v, sim_a) = if cfg.use_sim {
            (
                Some(Sim::new(store, &format!("{name}.sim_v"), cfg, rng)?),
                Some(Sim::new(store, &format!("{name}.sim_a"), cfg, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(LscmBlock { self_v, self_a, cross_v, cross_a, sim_v, sim_a })
    }

    /// Intra-speaker stage: self-attention on each stream, then each stream
    /// attends to the other.
    pub fn lim(&self, g: &mut Graph, store: &ParamStore, st: StreamState) -> Result<StreamState> {
        let (Some(sv), Some(sa), Some(cv), Some(ca)) = (&self.self_v, &self.self_a, &self.cross_v, &self.cross_a) else {
            return Ok(st);
        };
        let tv = sv.forward(g, store, st.u_v, st.u_v)?;
        let ta = sa.forward(g, store, st.u_a, st.u_a)?;
        let u_v = cv.forward(g, store, tv, ta)?;
        let u_a = ca.forward(g, store, ta, tv)?;
        Ok(StreamState { u_v, u_a })
    }

    /// Inter-speaker stage on both streams.
    pub fn sim(&self, g: &mut Graph, store: &ParamStore, st: StreamState) -> Result<StreamState> {
        let (Some(sv), Some(sa)) = (&self.sim_v, &self.sim_a) else {
            return Ok(st);
        };
        Ok(StreamState { u_v: sv.forward(g, store, st.u_v)?, u_a: sa.forward(g, store, st.u_a)? })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, st: StreamState) -> Result<StreamState> {
        let st = self.lim(g, store, st)?;
        self.sim(g, store, st)
    }
}

/// Sinusoidal positional encoding `[T, C]`.
pub fn positional_encoding(t: usize, c: usize) -> Tensor {
    Tensor::from_fn([t, c], |i| {
        let (pos, ch) = ((i / c) as f64, i % c);
        let freq = 1.0 / 10000f64.powf((ch - ch % 2) as f64 / c as f64);
        if ch % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Lscm {
    pub config: LscmConfig,
    pub blocks: Vec<LscmBlock>,
    /// Shared frame classifier on `concat(u_a, u_v)` of the target speaker.
    pub head: Linear,
}

impl Lscm {
    pub fn new(store: &mut ParamStore, name: &str, config: LscmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        for i in 0..config.blocks {
            blocks.push(LscmBlock::new(store, &format!("{name}.block{i}"), &config, rng)?);
        }
        let head = Linear::new(store, &format!("{name}.head"), 2 * config.channels, 2, rng)?;
        // Zero head: every block starts from uniform logits.
        zero(store, head.weight);
        zero(store, head.bias);
        Ok(Lscm { config, blocks, head })
    }

    /// Frame logits `[T, 2]` for speaker 0.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, st: StreamState) -> Result<Var> {
        let shape = g.shape(st.u_v).to_vec();
        let (t, c) = (shape[1], shape[2]);
        let a = g.narrow(st.u_a, 0, 0, 1)?;
        let a = g.reshape(a, &[t, c])?;
        let v = g.narrow(st.u_v, 0, 0, 1)?;
        let v = g.reshape(v, &[t, c])?;
        let cat = g.concat(&[a, v], 1)?;
        Ok(self.head.forward(g, store, cat)?)
    }

    /// Runs every block on `f_v, f_a: [S, T, C]` and returns one `[T, 2]`
    /// logit array per block (a single array when there are no blocks).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_v: Var, f_a: Var) -> Result<Vec<Var>> {
        let (sv, sa) = (g.shape(f_v).to_vec(), g.shape(f_a).to_vec());
        if sv.len() != 3 || sv != sa || sv[2] != self.config.channels {
            return Err(Error::Shape(format!(
                "visual {sv:?} and audio {sa:?} embeddings must both be [S, T, {}]",
                self.config.channels
            )));
        }
        if self.blocks.is_empty() {
            let st = StreamState { u_v: f_v, u_a: f_a };
            return Ok(vec![self.classify(g, store, st)?]);
        }
        let mut st = StreamState { u_v: f_v, u_a: f_a };
        if self.config.positional_encoding {
            let pe = positional_encoding(sv[1], sv[2]);
            let pe = g.constant(pe);
            let pe = g.repeat(pe, sv[0])?;
            st = StreamState { u_v: g.add(f_v, pe)?, u_a: g.add(f_a, pe)? };
        }
        let mut logits = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            st = blk.forward(g, store, st)?;
            logits.push(self.classify(g, store, st)?);
        }
        Ok(logits)
    }

    /// Zeroes every attention, convolution and MLP output projection.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            for l in [&b.self_v, &b.self_a, &b.cross_v, &b.cross_a].into_iter().flatten() {
                l.zero_output_projections(store);
            }
            for s in [&b.sim_v, &b.sim_a].into_iter().flatten() {
                s.zero_output_projections(store);
            }
        }
    }
}

/// Sum over blocks of the mean frame cross-entropy.
pub fn deep_supervision_loss(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let first = *logits.first().ok_or_else(|| Error::Usage("no logits to supervise".into()))?;
    let t = g.shape(first)[0];
    if labels.len() != t {
        return Err(Error::Data(format!("{} labels for {t} frames", labels.len())));
    }
    let mut total = g.cross_entropy(first, labels)?;
    for &l in &logits[1..] {
        let ce = g.cross_entropy(l, labels)?;
        total = g.add(total, ce)?;
    }
    Ok(total)
}
