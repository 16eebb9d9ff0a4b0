//! Training-time augmentation: one geometric transform per face track and
//! audio mixed in from another scene.

use loconet_tensor::Tensor;
use rand::Rng;

use super::render::sample_bilinear;
use super::SceneSample;
use crate::audio::Waveform;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub mix_gain: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, crop_scale: (0.8, 1.0), flip_prob: 0.5, max_rotation_deg: 15.0, mix_gain: (0.1, 0.5) }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }
}

/// Maps output pixels to source pixels: flip, then rotation about the
/// centre, then a square crop of relative side `scale` at `offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualTransform {
    pub scale: f64,
    pub offset: (f64, f64),
    pub flip: bool,
    pub angle: f64,
}

impl VisualTransform {
    pub const IDENTITY: VisualTransform = VisualTransform { scale: 1.0, offset: (0.0, 0.0), flip: false, angle: 0.0 };

    pub fn random(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let scale = rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let slack = (1.0 - scale) / 2.0;
        let off = |rng: &mut dyn rand::RngCore| if slack > 0.0 { rng.gen_range(-slack..=slack) } else { 0.0 };
        let offset = (off(rng), off(rng));
        let flip = rng.gen_bool(cfg.flip_prob);
        let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        VisualTransform { scale, offset, flip, angle }
    }
}

/// Applies one transform to every frame of a `[T, H, W, 1]` track.
pub fn transform_track(track: &Tensor, tr: &VisualTransform) -> Result<Tensor> {
    let s = track.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    let (sin, cos) = tr.angle.sin_cos();
    let mut out = Vec::with_capacity(track.numel());
    for f in 0..t {
        let frame = &track.data()[f * h * w..(f + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut u = (x as f64 + 0.5) / w as f64 - 0.5;
                let v = (y as f64 + 0.5) / h as f64 - 0.5;
                if tr.flip {
                    u = -u;
                }
                let ru = cos * u - sin * v;
                let rv = sin * u + cos * v;
                let su = ru * tr.scale + tr.offset.0;
                let sv = rv * tr.scale + tr.offset.1;
                out.push(sample_bilinear(frame, w, h, (su + 0.5) * w as f64 - 0.5, (sv + 0.5) * h as f64 - 0.5));
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

/// `a + gain · b`, with `b` truncated or zero-extended to `a`'s length.
pub fn mix_audio(a: &Waveform, b: &Waveform, gain: f64) -> Result<Waveform> {
    let mixed = a
        .samples()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x + gain * b.samples().get(i).copied().unwrap_or(0.0)).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(mixed, a.sample_rate())
}

/// Augments a sample. `pool` holds waveforms of other training scenes.
pub fn augment(sample: &SceneSample, pool: &[&Waveform], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SceneSample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let s = sample.video.shape().to_vec();
    let per = sample.video.numel() / s[0];
    let mut data = Vec::with_capacity(sample.video.numel());
    for slot in 0..s[0] {
        let track = Tensor::new(s[1..].to_vec(), sample.video.data()[slot * per..(slot + 1) * per].to_vec())?;
        let tr = VisualTransform::random(cfg, rng);
        data.extend_from_slice(transform_track(&track, &tr)?.data());
    }
    let audio = if pool.is_empty() {
        sample.audio.clone()
    } else {
        let other = pool[rng.gen_range(0..pool.len())];
        let gain = rng.gen_range(cfg.mix_gain.0..=cfg.mix_gain.1);
        mix_audio(&sample.audio, other, gain)?
    };
    Ok(SceneSample { video: Tensor::new(s, data)?, audio, ..sample.clone() })
}
