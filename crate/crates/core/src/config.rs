//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Unknown keys are rejected so that typos in ablation sweeps fail loudly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use loconet_tensor::AdamConfig;

use crate::audio::MelConfig;
use crate::conversim::augment::AugmentConfig;
use crate::conversim::SceneDistribution;
use crate::encoders::{AudioConfig, VisualConfig};
use crate::error::{Error, IoContext, Result};
use crate::lscm::{LscmConfig, SimKind};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Standard,
    Hard,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Split::Standard),
            "hard" => Ok(Split::Hard),
            _ => Err(Error::Config(format!("unknown split `{s}` (standard | hard)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Standard => "standard",
            Split::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    // Data.
    pub dataset: PathBuf,
    pub split: Split,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene_frames: usize,
    pub max_people: usize,
    pub distractor_prob: Option<f64>,
    pub snr_db: Option<[f64; 2]>,

    // Model.
    pub frames: usize,
    pub speakers: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub k: usize,
    pub s: usize,
    pub sim_kind: SimKind,
    pub use_lim: bool,
    pub use_sim: bool,
    pub positional_encoding: bool,
    pub mlp_ratio: usize,
    pub crop: usize,
    pub visual_front_width: usize,
    /// Residual stage widths before the final stage of width `channels`.
    pub visual_widths: Vec<usize>,
    pub tcn_blocks: usize,
    pub audio_widths: [usize; 4],
    pub mel_bins: usize,

    // Optimisation.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,

    // Augmentation.
    pub augment: bool,
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub mix_gain_min: f64,
    pub mix_gain_max: f64,

    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            split: Split::Standard,
            train_scenes: 200,
            val_scenes: 50,
            scene_frames: 64,
            max_people: 4,
            distractor_prob: None,
            snr_db: None,
            frames: 64,
            speakers: 3,
            channels: 64,
            blocks: 3,
            heads: 4,
            k: 7,
            s: 3,
            sim_kind: SimKind::Convolution,
            use_lim: true,
            use_sim: true,
            positional_encoding: true,
            mlp_ratio: 4,
            crop: 32,
            visual_front_width: 8,
            visual_widths: vec![16, 32, 32],
            tcn_blocks: 5,
            audio_widths: [16, 32, 32, 32],
            mel_bins: 40,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay: 0.95,
            epochs: 10,
            batch_size: 4,
            augment: true,
            crop_scale_min: 0.8,
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            mix_gain_min: 0.1,
            mix_gain_max: 0.5,
            checkpoint: PathBuf::from("checkpoint.bin"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "default" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "dataset",
        "split",
        "train_scenes",
        "val_scenes",
        "scene_frames",
        "max_people",
        "distractor_prob",
        "snr_db",
        "frames",
        "speakers",
        "channels",
        "blocks",
        "heads",
        "k",
        "s",
        "sim_kind",
        "use_lim",
        "use_sim",
        "positional_encoding",
        "mlp_ratio",
        "crop",
        "visual_front_width",
        "visual_widths",
        "tcn_blocks",
        "audio_widths",
        "mel_bins",
        "lr",
        "beta1",
        "beta2",
        "epsilon",
        "lr_decay",
        "epochs",
        "batch_size",
        "augment",
        "crop_scale_min",
        "flip_prob",
        "max_rotation_deg",
        "mix_gain_min",
        "mix_gain_max",
        "checkpoint",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "split" => self.split = v.parse()?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "val_scenes" => self.val_scenes = parse(key, v)?,
            "scene_frames" => self.scene_frames = parse(key, v)?,
            "max_people" => self.max_people = parse(key, v)?,
            "distractor_prob" => self.distractor_prob = parse_optional(key, v)?,
            "snr_db" => {
                self.snr_db = if v == "default" {
                    None
                } else {
                    let r: Vec<f64> = parse_list(key, v)?;
                    match r.as_slice() {
                        [lo, hi] => Some([*lo, *hi]),
                        _ => return Err(Error::Config(format!("`snr_db` takes `low,high`, got `{v}`"))),
                    }
                }
            }
            "frames" | "T" => self.frames = parse(key, v)?,
            "speakers" | "S" => self.speakers = parse(key, v)?,
            "channels" | "C" => self.channels = parse(key, v)?,
            "blocks" | "N" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "sim_kind" => self.sim_kind = v.parse()?,
            "use_lim" => self.use_lim = parse_bool(key, v)?,
            "use_sim" => self.use_sim = parse_bool(key, v)?,
            "positional_encoding" => self.positional_encoding = parse_bool(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "visual_front_width" => self.visual_front_width = parse(key, v)?,
            "visual_widths" => self.visual_widths = parse_list(key, v)?,
            "tcn_blocks" => self.tcn_blocks = parse(key, v)?,
            "audio_widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.audio_widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("`audio_widths` takes four widths, got `{v}`")))?;
            }
            "mel_bins" => self.mel_bins = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "crop_scale_min" => self.crop_scale_min = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "max_rotation_deg" => self.max_rotation_deg = parse(key, v)?,
            "mix_gain_min" => self.mix_gain_min = parse(key, v)?,
            "mix_gain_max" => self.mix_gain_max = parse(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a configuration, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "default".into());
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("seed", self.seed.to_string());
        put("dataset", self.dataset.display().to_string());
        put("split", self.split.to_string());
        put("train_scenes", self.train_scenes.to_string());
        put("val_scenes", self.val_scenes.to_string());
        put("scene_frames", self.scene_frames.to_string());
        put("max_people", self.max_people.to_string());
        put("distractor_prob", opt(self.distractor_prob.map(|v| v.to_string())));
        put("snr_db", opt(self.snr_db.map(|r| join(&r))));
        put("frames", self.frames.to_string());
        put("speakers", self.speakers.to_string());
        put("channels", self.channels.to_string());
        put("blocks", self.blocks.to_string());
        put("heads", self.heads.to_string());
        put("k", self.k.to_string());
        put("s", self.s.to_string());
        put("sim_kind", self.sim_kind.to_string());
        put("use_lim", self.use_lim.to_string());
        put("use_sim", self.use_sim.to_string());
        put("positional_encoding", self.positional_encoding.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("crop", self.crop.to_string());
        put("visual_front_width", self.visual_front_width.to_string());
        put("visual_widths", join(&self.visual_widths));
        put("tcn_blocks", self.tcn_blocks.to_string());
        put("audio_widths", join(&self.audio_widths));
        put("mel_bins", self.mel_bins.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("epsilon", self.epsilon.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("augment", self.augment.to_string());
        put("crop_scale_min", self.crop_scale_min.to_string());
        put("flip_prob", self.flip_prob.to_string());
        put("max_rotation_deg", self.max_rotation_deg.to_string());
        put("mix_gain_min", self.mix_gain_min.to_string());
        put("mix_gain_max", self.mix_gain_max.to_string());
        put("checkpoint", self.checkpoint.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay = {} outside (0, 1]", self.lr_decay)));
        }
        if self.frames == 0 || self.scene_frames == 0 {
            return Err(Error::Config("frames and scene_frames must be positive".into()));
        }
        if self.max_people == 0 {
            return Err(Error::Config("max_people must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.crop_scale_min) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("crop_scale_min and flip_prob must lie in [0, 1]".into()));
        }
        if !(self.mix_gain_min <= self.mix_gain_max) {
            return Err(Error::Config("mix_gain_min exceeds mix_gain_max".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut stage_widths = self.visual_widths.clone();
        stage_widths.push(self.channels);
        ModelConfig {
            visual: VisualConfig {
                crop: self.crop,
                front_width: self.visual_front_width,
                stage_widths,
                tcn_blocks: self.tcn_blocks,
                tcn_kernel: VisualConfig::desk(self.crop, self.channels).tcn_kernel,
            },
            audio: AudioConfig { mel_bins: self.mel_bins, widths: self.audio_widths, channels: self.channels },
            lscm: LscmConfig {
                blocks: self.blocks,
                speakers: self.speakers,
                channels: self.channels,
                heads: self.heads,
                k: self.k,
                s: LscmConfig::fit_speaker_kernel(self.s, self.speakers),
                sim_kind: self.sim_kind,
                use_lim: self.use_lim,
                use_sim: self.use_sim,
                positional_encoding: self.positional_encoding,
                mlp_ratio: self.mlp_ratio,
            },
            mel: MelConfig { mel_bins: self.mel_bins, ..MelConfig::default() },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            enabled: self.augment,
            crop_scale: (self.crop_scale_min, 1.0),
            flip_prob: self.flip_prob,
            max_rotation_deg: self.max_rotation_deg,
            mix_gain: (self.mix_gain_min, self.mix_gain_max),
        }
    }

    /// Scene distribution for dataset generation.
    pub fn scene_distribution(&self) -> SceneDistribution {
        let mut d = match self.split {
            Split::Standard => SceneDistribution::standard(self.scene_frames, self.speakers, self.crop),
            Split::Hard => SceneDistribution::hard(self.scene_frames, self.speakers, self.crop),
        };
        d.people.1 = self.max_people.max(d.people.0);
        if let Some(p) = self.distractor_prob {
            d.distractor_prob = p;
        }
        if let Some(r) = self.snr_db {
            d.snr_db = r;
        }
        d
    }
}
