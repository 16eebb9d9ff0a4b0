//! The complete detector: visual and audio encoders feeding the context stack.

use std::path::Path;

use loconet_tensor::checkpoint::{load_store, save_store};
use loconet_tensor::rng::{derive_rng, tag};
use loconet_tensor::{Graph, ParamStore, Tensor, TensorError, Var};

use crate::audio::{MelConfig, MelFrontend, Waveform};
use crate::encoders::{broadcast_audio, AudioConfig, AudioEncoder, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::lscm::{Lscm, LscmConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub audio: AudioConfig,
    pub lscm: LscmConfig,
    pub mel: MelConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lscm.validate()?;
        if self.visual.channels() != self.lscm.channels || self.audio.channels != self.lscm.channels {
            return Err(Error::Config(format!(
                "encoder widths (visual {}, audio {}) must equal C = {}",
                self.visual.channels(),
                self.audio.channels,
                self.lscm.channels
            )));
        }
        if self.audio.mel_bins != self.mel.mel_bins {
            return Err(Error::Config(format!(
                "audio encoder expects {} mel bins but the frontend makes {}",
                self.audio.mel_bins, self.mel.mel_bins
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoCoNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub lscm: Lscm,
    frontend: MelFrontend,
}

impl LoCoNet {
    /// Builds a freshly initialised model; initial values depend only on
    /// `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let visual = VisualEncoder::new(&mut store, "visual", config.visual.clone(), &mut derive_rng(seed, &[tag("visual")]))?;
        let audio = AudioEncoder::new(&mut store, "audio", config.audio.clone(), &mut derive_rng(seed, &[tag("audio")]))?;
        let lscm = Lscm::new(&mut store, "lscm", config.lscm.clone(), &mut derive_rng(seed, &[tag("lscm")]))?;
        let frontend = MelFrontend::new(config.mel)?;
        Ok(LoCoNet { config, store, visual, audio, lscm, frontend })
    }

    pub fn speakers(&self) -> usize {
        self.config.lscm.speakers
    }

    /// Log-mel spectrogram `[4T, M]` of a waveform covering `t` frames.
    pub fn spectrogram(&self, w: &Waveform, t: usize) -> Result<Tensor> {
        self.frontend.spectrogram(w, t)
    }

    /// Face tracks `[B, T, H, W, 1]` to embeddings `[B, T, C]`.
    pub fn encode_visual(&self, g: &mut Graph, video: &Tensor) -> Result<Var> {
        self.visual.forward(g, &self.store, video)
    }

    /// Spectrogram `[4T, M]` to embeddings `[T, C]`.
    pub fn encode_audio(&self, g: &mut Graph, mel: &Tensor) -> Result<Var> {
        let m = g.constant(mel.clone());
        self.audio.forward(g, &self.store, m)
    }

    /// Context stack on precomputed embeddings: `f_v: [S, T, C]`, `f_a: [T, C]`.
    pub fn forward_features(&self, g: &mut Graph, f_v: Var, f_a: Var) -> Result<Vec<Var>> {
        let s = g.shape(f_v)[0];
        if s != self.speakers() {
            return Err(Error::Shape(format!("{s} stacked tracks but the model expects S = {}", self.speakers())));
        }
        let f_a = broadcast_audio(g, f_a, s)?;
        self.lscm.forward(g, &self.store, f_v, f_a)
    }

    /// One logit array `[T, 2]` per block for the track at slot 0 of `video`.
    pub fn forward(&self, g: &mut Graph, video: &Tensor, mel: &Tensor) -> Result<Vec<Var>> {
        let f_v = self.encode_visual(g, video)?;
        let f_a = self.encode_audio(g, mel)?;
        self.forward_features(g, f_v, f_a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(path, &self.store).map_err(|e| match e {
            TensorError::Io(io) => Error::io(path, io),
            other => Error::Tensor(other),
        })
    }

    /// Loads parameter values; a checkpoint written for a different
    /// configuration is reported as a version error.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_store(path, &mut self.store).map_err(|e| match e {
            TensorError::Io(io) => Error::io(path, io),
            TensorError::Checkpoint(detail) => {
                Error::Version(format!("{}: checkpoint does not match the model configuration: {detail}", path.display()))
            }
            other => Error::Tensor(other),
        })
    }
}

/// Final-block score per frame: `logit₁ − logit₀`.
pub fn frame_scores(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks_exact(2).map(|r| r[1] - r[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lscm::SimKind;

    pub(crate) fn tiny(blocks: usize) -> ModelConfig {
        ModelConfig {
            visual: VisualConfig { crop: 16, front_width: 4, stage_widths: vec![8], tcn_blocks: 1, tcn_kernel: 3 },
            audio: AudioConfig { mel_bins: 16, widths: [4, 4, 4, 4], channels: 8 },
            lscm: LscmConfig {
                blocks,
                speakers: 2,
                channels: 8,
                heads: 2,
                k: 3,
                s: 1,
                sim_kind: SimKind::Convolution,
                use_lim: true,
                use_sim: true,
                positional_encoding: true,
                mlp_ratio: 2,
            },
            mel: MelConfig { mel_bins: 16, ..MelConfig::default() },
        }
    }

    #[test]
    fn forward_shapes() {
        let model = LoCoNet::new(tiny(2), 0).unwrap();
        let mut g = Graph::inference();
        let video = Tensor::full([2, 5, 16, 16, 1], 0.5);
        let mel = Tensor::full([20, 16], -3.0);
        let logits = model.forward(&mut g, &video, &mel).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(g.shape(logits[1]), &[5, 2]);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = tiny(1);
        cfg.audio.channels = 4;
        assert!(matches!(LoCoNet::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_checkpoint_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        LoCoNet::new(tiny(1), 0).unwrap().save(&path).unwrap();
        let mut other = LoCoNet::new(tiny(2), 0).unwrap();
        assert!(matches!(other.load(&path), Err(Error::Version(_))));
        let mut same = LoCoNet::new(tiny(1), 5).unwrap();
        same.load(&path).unwrap();
    }
}
