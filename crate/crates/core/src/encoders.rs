//! Per-frame visual and audio embeddings.

use loconet_tensor::nn::{LayerNorm, Linear};
use loconet_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Frames stacked into channels by the front convolution.
pub const TEMPORAL_KERNEL: usize = 5;

/// Variance floor for per-frame standardisation; keeps flat frames finite.
pub const FRAME_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualConfig {
    /// Square face crop side in pixels.
    pub crop: usize,
    pub front_width: usize,
    /// Widths of the residual stages; the last one is the embedding size.
    pub stage_widths: Vec<usize>,
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
}

impl VisualConfig {
    pub fn desk(crop: usize, channels: usize) -> Self {
        VisualConfig { crop, front_width: 8, stage_widths: vec![16, 32, 32, channels], tcn_blocks: 5, tcn_kernel: 3 }
    }

    pub fn channels(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = k * k * c_in;
        let weight = store.add_uniform(format!("{name}.weight"), &[k, k, c_in, c_out], fan_in, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng)?;
        Ok(ConvParams { weight, bias, stride, padding })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, Some(b), (self.stride, self.stride), (self.padding, self.padding))?)
    }
}

#[derive(Debug, Clone)]
struct ResidualStage {
    conv1: ConvParams,
    conv2: ConvParams,
    shortcut: ConvParams,
}

#[derive(Debug, Clone)]
struct TcnBlock {
    dw_weight: ParamId,
    dw_bias: ParamId,
    pw: Linear,
}

/// Face-track encoder: per-frame standardisation, temporal front convolution,
/// residual 2-D trunk, global spatial average, a depthwise temporal
/// convolution network and a closing layer norm.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    front: ConvParams,
    stages: Vec<ResidualStage>,
    tcn: Vec<TcnBlock>,
    out_norm: LayerNorm,
}

/// Stacks frames `t-2 ..= t+2` into channels (zero beyond the ends):
/// `[B, T, H, W, 1] → [B·T, H, W, 5]`.
pub fn temporal_stack(video: &Tensor) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 5 || s[4] != 1 {
        return Err(Error::Shape(format!("video must be [B, T, H, W, 1], got {s:?}")));
    }
    let (b, t, hw) = (s[0], s[1], s[2] * s[3]);
    let half = (TEMPORAL_KERNEL / 2) as isize;
    let src = video.data();
    let mut out = vec![0.0; b * t * hw * TEMPORAL_KERNEL];
    for n in 0..b {
        for f in 0..t {
            let dst = &mut out[(n * t + f) * hw * TEMPORAL_KERNEL..(n * t + f + 1) * hw * TEMPORAL_KERNEL];
            for j in 0..TEMPORAL_KERNEL {
                let sf = f as isize + j as isize - half;
                if sf < 0 || sf >= t as isize {
                    continue;
                }
                let frame = &src[(n * t + sf as usize) * hw..(n * t + sf as usize + 1) * hw];
                for p in 0..hw {
                    dst[p * TEMPORAL_KERNEL + j] = frame[p];
                }
            }
        }
    }
    Ok(Tensor::new(vec![b * t, s[2], s[3], TEMPORAL_KERNEL], out)?)
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: VisualConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.stage_widths.is_empty() || config.crop == 0 {
            return Err(Error::Config("visual encoder needs a crop size and at least one stage".into()));
        }
        if config.tcn_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel {} must be odd", config.tcn_kernel)));
        }
        let front = ConvParams::new(store, &format!("{name}.front"), 3, TEMPORAL_KERNEL, config.front_width, 2, 1, rng)?;
        let mut stages = Vec::new();
        let mut c_in = config.front_width;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            let p = format!("{name}.stage{i}");
            stages.push(ResidualStage {
                conv1: ConvParams::new(store, &format!("{p}.conv1"), 3, c_in, w, 2, 1, rng)?,
                conv2: ConvParams::new(store, &format!("{p}.conv2"), 3, w, w, 1, 1, rng)?,
                shortcut: ConvParams::new(store, &format!("{p}.shortcut"), 1, c_in, w, 2, 0, rng)?,
            });
            c_in = w;
        }
        let c = config.channels();
        let mut tcn = Vec::new();
        for i in 0..config.tcn_blocks {
            let p = format!("{name}.tcn{i}");
            tcn.push(TcnBlock {
                dw_weight: store.add_uniform(format!("{p}.dw.weight"), &[config.tcn_kernel, c], config.tcn_kernel, rng)?,
                dw_bias: store.add_uniform(format!("{p}.dw.bias"), &[c], config.tcn_kernel, rng)?,
                pw: Linear::new(store, &format!("{p}.pw"), c, c, rng)?,
            });
        }
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), c)?;
        Ok(VisualEncoder { config, front, stages, tcn, out_norm })
    }

    /// Bias parameters of every layer, in construction order.
    pub fn bias_params(&self) -> Vec<ParamId> {
        let mut out = vec![self.front.bias];
        for s in &self.stages {
            out.extend([s.conv1.bias, s.conv2.bias, s.shortcut.bias]);
        }
        for b in &self.tcn {
            out.extend([b.dw_bias, b.pw.bias]);
        }
        out
    }

    /// `[B, T, H, W, 1] → [B, T, C]`. Tracks in the batch never interact.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: &Tensor) -> Result<Var> {
        let s = video.shape();
        if s.len() != 5 || s[2] != self.config.crop || s[3] != self.config.crop || s[4] != 1 {
            return Err(Error::Shape(format!(
                "face tracks must be [B, T, {0}, {0}, 1], got {s:?}",
                self.config.crop
            )));
        }
        let (b, t) = (s[0], s[1]);
        let video = &standardize_frames(video);
        let stacked = g.constant(temporal_stack(video)?);
        let x = self.front.forward(g, store, stacked)?;
        let mut x = g.relu(x);
        for st in &self.stages {
            let h = st.conv1.forward(g, store, x)?;
            let h = g.relu(h);
            let h = st.conv2.forward(g, store, h)?;
            let sc = st.shortcut.forward(g, store, x)?;
            let sum = g.add(h, sc)?;
            x = g.relu(sum);
        }
        let pooled = g.mean_pool2d(x)?;
        let mut x = g.reshape(pooled, &[b, t, self.config.channels()])?;
        for blk in &self.tcn {
            let h = g.relu(x);
            let w = g.param(store, blk.dw_weight);
            let bias = g.param(store, blk.dw_bias);
            let h = g.depthwise_conv1d(h, w, bias)?;
            let h = g.relu(h);
            let h = blk.pw.forward(g, store, h)?;
            x = g.add(x, h)?;
        }
        Ok(self.out_norm.forward(g, store, x)?)
    }
}

/// Zero mean and unit variance within every frame.
pub fn standardize_frames(video: &Tensor) -> Tensor {
    let s = video.shape();
    let hw = s[2] * s[3];
    let mut d = video.data().to_vec();
    for fr in d.chunks_mut(hw) {
        let m = fr.iter().sum::<f64>() / hw as f64;
        let v = fr.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
        let r = 1.0 / (v + FRAME_EPS).sqrt();
        fr.iter_mut().for_each(|x| *x = (*x - m) * r);
    }
    Tensor::new(s.to_vec(), d).expect("same shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub mel_bins: usize,
    /// Channel widths of the four convolution blocks.
    pub widths: [usize; 4],
    pub channels: usize,
}

impl AudioConfig {
    pub fn desk(channels: usize) -> Self {
        AudioConfig { mel_bins: 40, widths: [16, 32, 32, 32], channels }
    }

    pub fn nominal(channels: usize) -> Self {
        AudioConfig { mel_bins: 40, widths: [32, 64, 128, 128], channels }
    }
}

/// Temporal lengths at each stage of the audio encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioTrace {
    pub input: usize,
    pub block1: usize,
    pub block2: usize,
    /// Block-3 output before its pooling layer; concatenated with the upsampled
    /// block-4 features.
    pub block3_tap: usize,
    pub block3: usize,
    pub block4: usize,
    pub upsampled: usize,
    pub output: usize,
}

/// Frame-rate audio encoder: four 3×3 convolution blocks, 2×2 max pooling
/// after the first three, no temporal pooling after the fourth, a stride-2
/// transposed convolution back to frame rate and a pre-pool block-3 tap.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub config: AudioConfig,
    blocks: Vec<ConvParams>,
    up_weight: ParamId,
    up_bias: ParamId,
    proj: Linear,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: AudioConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.mel_bins < 8 {
            return Err(Error::Config(format!("audio encoder needs at least 8 mel bins, got {}", config.mel_bins)));
        }
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ConvParams::new(store, &format!("{name}.block{}", i + 1), 3, c_in, w, 1, 1, rng)?);
            c_in = w;
        }
        let f4 = config.mel_bins / 8;
        let up_in = f4 * config.widths[3];
        let c = config.channels;
        let up_weight = store.add_uniform(format!("{name}.up.weight"), &[2, up_in, c], up_in, rng)?;
        let up_bias = store.add_uniform(format!("{name}.up.bias"), &[c], up_in, rng)?;
        let tap = (config.mel_bins / 4) * config.widths[2];
        let proj = Linear::new(store, &format!("{name}.proj"), tap + c, c, rng)?;
        Ok(AudioEncoder { config, blocks, up_weight, up_bias, proj })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, mel)?.0)
    }

    /// `[4T, M] → [T, C]` with the temporal length seen at every stage.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<(Var, AudioTrace)> {
        let s = g.shape(mel).to_vec();
        if s.len() != 2 || s[1] != self.config.mel_bins {
            return Err(Error::Shape(format!("spectrogram must be [4T, {}], got {s:?}", self.config.mel_bins)));
        }
        if s[0] == 0 || s[0] % 4 != 0 {
            return Err(Error::Shape(format!("spectrogram has {} rows, not a positive multiple of 4", s[0])));
        }
        let t = s[0] / 4;
        let len = |g: &Graph, v: Var| g.shape(v)[1];
        let x = g.reshape(mel, &[1, s[0], s[1], 1])?;

        let x = self.blocks[0].forward(g, store, x)?;
        let x = g.relu(x);
        let x = g.max_pool2d(x, (2, 2), (2, 2))?;
        let block1 = len(g, x);

        let x = self.blocks[1].forward(g, store, x)?;
        let x = g.relu(x);
        let x = g.max_pool2d(x, (2, 2), (2, 2))?;
        let block2 = len(g, x);

        let x = self.blocks[2].forward(g, store, x)?;
        let tap = g.relu(x);
        let block3_tap = len(g, tap);
        // An odd frame count is padded by repeating the last frame so the
        // pooled length rounds up; the surplus upsampled frame is cropped.
        let pooled_in = if t % 2 == 1 {
            let last = g.narrow(tap, 1, t - 1, 1)?;
            g.concat(&[tap, last], 1)?
        } else {
            tap
        };
        let x = g.max_pool2d(pooled_in, (2, 2), (2, 2))?;
        let block3 = len(g, x);

        let x = self.blocks[3].forward(g, store, x)?;
        let x = g.relu(x);
        let block4 = len(g, x);

        let xs = g.shape(x).to_vec();
        let x = g.reshape(x, &[1, xs[1], xs[2] * xs[3]])?;
        let w = g.param(store, self.up_weight);
        let b = g.param(store, self.up_bias);
        let up = g.conv_transpose1d(x, w, b, 2)?;
        let upsampled = len(g, up);
        let up = g.narrow(up, 1, 0, t)?;
        let up = g.reshape(up, &[t, self.config.channels])?;

        let ts = g.shape(tap).to_vec();
        let tap = g.reshape(tap, &[t, ts[2] * ts[3]])?;
        let cat = g.concat(&[tap, up], 1)?;
        let out = self.proj.forward(g, store, cat)?;
        let trace = AudioTrace { input: s[0], block1, block2, block3_tap, block3, block4, upsampled, output: t };
        Ok((out, trace))
    }
}

/// `[T, C] → [S, T, C]` by repetition.
pub fn broadcast_audio(g: &mut Graph, fa: Var, speakers: usize) -> Result<Var> {
    if speakers == 0 {
        return Err(Error::Config("at least one speaker is required".into()));
    }
    Ok(g.repeat(fa, speakers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use loconet_tensor::rng::derive_rng;

    fn video(b: usize, t: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, &[]);
        Tensor::from_fn([b, t, hw, hw, 1], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn visual_preserves_length_and_rejects_crop() {
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, "v", VisualConfig::desk(16, 16), &mut derive_rng(0, &[])).unwrap();
        for t in [1, 4, 9] {
            let mut g = Graph::inference();
            let y = enc.forward(&mut g, &store, &video(2, t, 16, t as u64)).unwrap();
            assert_eq!(g.shape(y), &[2, t, 16]);
        }
        let mut g = Graph::inference();
        assert!(matches!(enc.forward(&mut g, &store, &video(1, 3, 12, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_and_biases_give_constant_rows() {
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, "v", VisualConfig::desk(16, 8), &mut derive_rng(1, &[])).unwrap();
        for id in enc.bias_params() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference();
        let y = enc.forward(&mut g, &store, &Tensor::zeros([1, 6, 16, 16, 1])).unwrap();
        let rows: Vec<&[f64]> = g.data(y).chunks(8).collect();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn temporal_stack_places_neighbours() {
        let v = Tensor::from_fn([1, 3, 1, 1, 1], |i| i as f64 + 1.0);
        let s = temporal_stack(&v).unwrap();
        assert_eq!(s.shape(), &[3, 1, 1, 5]);
        assert_eq!(s.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn audio_ladder_for_even_and_odd_lengths() {
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut store, "a", AudioConfig::desk(16), &mut derive_rng(2, &[])).unwrap();
        for t in [20, 7] {
            let mut g = Graph::inference();
            let a = g.constant(Tensor::from_fn([4 * t, 40], |i| (i as f64 * 0.1).sin()));
            let (y, tr) = enc.forward_traced(&mut g, &store, a).unwrap();
            assert_eq!(g.shape(y), &[t, 16]);
            assert_eq!((tr.block1, tr.block2, tr.block3_tap), (2 * t, t, t));
            assert_eq!(tr.block3, t.div_ceil(2));
            assert_eq!(tr.upsampled, 2 * t.div_ceil(2));
        }
        let mut g = Graph::inference();
        let bad = g.constant(Tensor::zeros([18, 40]));
        assert!(matches!(enc.forward(&mut g, &store, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_copies_are_identical() {
        let mut g = Graph::inference();
        let fa = g.constant(Tensor::from_fn([4, 3], |i| i as f64 * 0.3));
        let one = broadcast_audio(&mut g, fa, 1).unwrap();
        assert_eq!(g.data(one), g.data(fa));
        let three = broadcast_audio(&mut g, fa, 3).unwrap();
        let d = g.data(three);
        assert_eq!(&d[..12], &d[12..24]);
        assert_eq!(&d[12..24], &d[24..]);
    }
}
