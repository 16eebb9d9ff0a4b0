//! Synthetic multi-person conversations with aligned audio, face tracks and
//! frame-level speaking labels.
//!
//! Each speaking person contributes a carrier tone whose amplitude follows a
//! person-specific syllable rhythm; their rendered mouth opens and closes with
//! the same rhythm in phase. Silent people keep an almost closed mouth, except
//! during optional distractor episodes (chewing-like motion with no sound).

pub mod augment;
pub mod render;
pub mod turns;

use loconet_tensor::rng::{derive_rng, tag};
use loconet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE, VIDEO_FPS};
use crate::error::{Error, Result};
use render::FaceStyle;
use turns::{simulate_turns, TurnParams};

/// Mouth openness never exceeded by a silent, non-distracted face.
pub const MOUTH_NOISE_FLOOR: f64 = 0.1;
/// Minimum openness of a speaking face.
pub const SPEAKING_MIN_OPENNESS: f64 = 0.3;
const CARRIER_SPACING_HZ: f64 = 350.0;
const VOICE_GAIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceSize {
    Small,
    Medium,
    Large,
}

impl FaceSize {
    /// Inclusive range of native face widths in pixels.
    pub fn width_range(self) -> (usize, usize) {
        match self {
            FaceSize::Small => (32, 63),
            FaceSize::Medium => (64, 128),
            FaceSize::Large => (129, 192),
        }
    }

    pub fn from_width(width: usize) -> FaceSize {
        if width < 64 {
            FaceSize::Small
        } else if width <= 128 {
            FaceSize::Medium
        } else {
            FaceSize::Large
        }
    }

    pub fn all() -> [FaceSize; 3] {
        [FaceSize::Small, FaceSize::Medium, FaceSize::Large]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_people: usize,
    /// Speakers stacked per sample, target included.
    pub context_size: usize,
    pub frames: usize,
    pub fps: u32,
    /// Side of the square face crop fed to the model.
    pub crop: usize,
    pub overlap_prob: f64,
    pub off_screen_prob: f64,
    pub silence_prob: f64,
    pub snr_db: [f64; 2],
    pub face_sizes: Vec<FaceSize>,
    pub mean_turn_frames: f64,
    /// Per-person probability of silent mouth-motion episodes.
    pub distractor_prob: f64,
    /// Pixel noise standard deviation at render resolution.
    pub pixel_noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_people == 0 || self.frames == 0 || self.context_size == 0 || self.crop == 0 {
            return Err(Error::Config("people, frames, context size and crop must be positive".into()));
        }
        if self.fps != VIDEO_FPS {
            return Err(Error::Config(format!("only {VIDEO_FPS} fps video is supported, got {}", self.fps)));
        }
        if self.face_sizes.len() != self.num_people {
            return Err(Error::Config(format!(
                "{} face sizes for {} people",
                self.face_sizes.len(),
                self.num_people
            )));
        }
        for (name, p) in [
            ("overlap_prob", self.overlap_prob),
            ("off_screen_prob", self.off_screen_prob),
            ("silence_prob", self.silence_prob),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.snr_db[0] <= self.snr_db[1]) || self.pixel_noise < 0.0 {
            return Err(Error::Config(format!("invalid SNR range {:?} or pixel noise {}", self.snr_db, self.pixel_noise)));
        }
        self.turn_params().validate()
    }

    pub fn turn_params(&self) -> TurnParams {
        TurnParams {
            people: self.num_people,
            mean_turn_frames: self.mean_turn_frames,
            silence_prob: self.silence_prob,
            overlap_prob: self.overlap_prob,
        }
    }

    pub fn samples(&self) -> usize {
        self.frames * (SAMPLE_RATE / VIDEO_FPS) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub id: usize,
    pub visible: bool,
    pub face_size: FaceSize,
    /// Native face width before resizing to the crop.
    pub face_width: usize,
    /// Side of the patch the face is rendered at.
    pub detail: usize,
    pub carrier_hz: f64,
    pub syllable_hz: f64,
    pub phase: f64,
    pub distractor_hz: f64,
    pub style: FaceStyle,
}

impl Person {
    /// Syllable rhythm in [0, 1] at time `seconds`.
    pub fn rhythm(&self, seconds: f64) -> f64 {
        0.5 + 0.5 * (std::f64::consts::TAU * self.syllable_hz * seconds + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub spec: SceneSpec,
    pub people: Vec<Person>,
    /// `labels[p][t]`.
    pub labels: Vec<Vec<u8>>,
    /// `openness[p][t]`, the rendered mouth opening.
    pub openness: Vec<Vec<f64>>,
    pub audio: Waveform,
    /// `[T, H, W, 1]` per visible person.
    pub tracks: Vec<Option<Tensor>>,
}

impl Scene {
    pub fn visible(&self) -> Vec<usize> {
        self.people.iter().filter(|p| p.visible).map(|p| p.id).collect()
    }

    pub fn faces_visible(&self) -> usize {
        self.people.iter().filter(|p| p.visible).count()
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn is_hard(&self) -> bool {
        self.spec.overlap_prob >= 0.3 && self.spec.face_sizes.iter().all(|s| *s == FaceSize::Small)
    }

    /// Fraction of frames where at least one person speaks.
    pub fn speaking_fraction(&self) -> f64 {
        let t = self.frames();
        (0..t).filter(|&f| self.labels.iter().any(|l| l[f] == 1)).count() as f64 / t as f64
    }
}

fn distractor_episodes(frames: usize, prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    const MEAN_LEN: f64 = 12.0;
    let mut out = vec![false; frames];
    if prob <= 0.0 {
        return out;
    }
    let on_rate = prob / MEAN_LEN;
    let mut on = rng.gen_bool(prob);
    for v in out.iter_mut() {
        *v = on;
        on = if on { !rng.gen_bool(1.0 / MEAN_LEN) } else { rng.gen_bool(on_rate.min(1.0)) };
    }
    out
}

/// Renders a scene; a pure function of the spec.
pub fn generate_scene(id: usize, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (p, t) = (spec.num_people, spec.frames);
    let mut turn_rng = derive_rng(spec.seed, &[tag("turns")]);
    let turns = simulate_turns(&spec.turn_params(), t, &mut turn_rng)?;

    let mut person_rng = derive_rng(spec.seed, &[tag("people")]);
    let base = person_rng.gen_range(300.0..500.0);
    let mut slots: Vec<usize> = (0..p).collect();
    slots.shuffle(&mut person_rng);
    let mut people = Vec::with_capacity(p);
    for (i, &size) in spec.face_sizes.iter().enumerate() {
        let (lo, hi) = size.width_range();
        let face_width = person_rng.gen_range(lo..=hi);
        people.push(Person {
            id: i,
            visible: i == 0 || !person_rng.gen_bool(spec.off_screen_prob),
            face_size: size,
            face_width,
            detail: (face_width as f64 / 4.0).round() as usize,
            carrier_hz: base + CARRIER_SPACING_HZ * slots[i] as f64,
            syllable_hz: person_rng.gen_range(3.0..6.0),
            phase: person_rng.gen_range(0.0..std::f64::consts::TAU),
            distractor_hz: person_rng.gen_range(2.0..7.0),
            style: FaceStyle::random(&mut person_rng),
        });
    }

    let mut labels = vec![vec![0u8; t]; p];
    let mut openness = vec![vec![0.0; t]; p];
    let fps = spec.fps as f64;
    for (i, person) in people.iter().enumerate() {
        let mut r = derive_rng(spec.seed, &[tag("mouth"), i as u64]);
        let distract = distractor_episodes(t, spec.distractor_prob, &mut r);
        for f in 0..t {
            let sec = f as f64 / fps;
            if turns.speaking[i][f] {
                labels[i][f] = 1;
                openness[i][f] = SPEAKING_MIN_OPENNESS + (1.0 - SPEAKING_MIN_OPENNESS) * person.rhythm(sec);
            } else if distract[f] {
                let osc = 0.5 + 0.5 * (std::f64::consts::TAU * person.distractor_hz * sec).sin();
                openness[i][f] = 0.1 + 0.5 * osc;
            } else {
                openness[i][f] = r.gen_range(0.0..0.08);
            }
        }
    }

    let audio = synthesize_audio(spec, &people, &turns.speaking)?;

    let mut tracks = Vec::with_capacity(p);
    for (i, person) in people.iter().enumerate() {
        if !person.visible {
            tracks.push(None);
            continue;
        }
        let mut r = derive_rng(spec.seed, &[tag("render"), i as u64]);
        let jitter = Normal::new(0.0, 0.015).expect("valid");
        let light = Normal::new(0.0, 0.02).expect("valid");
        let hw = spec.crop * spec.crop;
        let mut data = Vec::with_capacity(t * hw);
        for f in 0..t {
            let offset = (jitter.sample(&mut r), jitter.sample(&mut r));
            let mut img = render::render_face(&person.style, person.detail, openness[i][f], offset, light.sample(&mut r));
            render::add_pixel_noise(&mut img, spec.pixel_noise, &mut r);
            let img = render::resize(&img, person.detail, spec.crop);
            data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        tracks.push(Some(Tensor::new(vec![t, spec.crop, spec.crop, 1], data)?));
    }

    Ok(Scene { id, spec: spec.clone(), people, labels, openness, audio, tracks })
}

fn synthesize_audio(spec: &SceneSpec, people: &[Person], speaking: &[Vec<bool>]) -> Result<Waveform> {
    let n = spec.samples();
    let sr = SAMPLE_RATE as f64;
    let per_frame = (SAMPLE_RATE / spec.fps) as usize;
    let mut signal = vec![0.0; n];
    for (i, person) in people.iter().enumerate() {
        for (s, out) in signal.iter_mut().enumerate() {
            if !speaking[i][s / per_frame] {
                continue;
            }
            let sec = s as f64 / sr;
            let env = SPEAKING_MIN_OPENNESS + (1.0 - SPEAKING_MIN_OPENNESS) * person.rhythm(sec);
            *out += VOICE_GAIN * env * (std::f64::consts::TAU * person.carrier_hz * sec).sin();
        }
    }
    let mut rng = derive_rng(spec.seed, &[tag("noise")]);
    let snr = if spec.snr_db[0] < spec.snr_db[1] { rng.gen_range(spec.snr_db[0]..spec.snr_db[1]) } else { spec.snr_db[0] };
    let active = signal.iter().filter(|v| **v != 0.0).count();
    // Signal power is measured over speech only, so silent scenes still get
    // the noise level a speaking voice would have.
    let power = if active > 0 {
        signal.iter().map(|v| v * v).sum::<f64>() / active as f64
    } else {
        0.5 * (VOICE_GAIN * 0.65).powi(2)
    };
    let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    for v in signal.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    Waveform::new(signal, SAMPLE_RATE)
}

/// One training or evaluation view of a scene: the target and its context
/// speakers stacked on the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: usize,
    /// Person ids per slot; slot 0 is the target.
    pub entities: Vec<usize>,
    /// `[S, T, H, W, 1]`.
    pub video: Tensor,
    pub audio: Waveform,
    pub labels: Vec<usize>,
    pub context_labels: Vec<Vec<usize>>,
}

/// Chooses context slots for `target`: other visible people uniformly without
/// replacement, repeated cyclically when there are fewer than `S - 1` of them.
/// A target alone on screen fills every slot with itself.
pub fn choose_context(scene: &Scene, target: usize, s: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if target >= scene.people.len() || !scene.people[target].visible {
        return Err(Error::Data(format!("person {target} is not visible in scene {}", scene.id)));
    }
    if s == 0 {
        return Err(Error::Config("context size must be at least 1".into()));
    }
    let mut others: Vec<usize> = scene.visible().into_iter().filter(|&p| p != target).collect();
    others.shuffle(rng);
    let mut slots = vec![target];
    if others.is_empty() {
        slots.resize(s, target);
    } else {
        slots.extend((0..s - 1).map(|i| others[i % others.len()]));
    }
    Ok(slots)
}

/// Stacks the tracks of `entities` into `[S, T, H, W, 1]`.
pub fn stack_tracks(scene: &Scene, entities: &[usize]) -> Result<Tensor> {
    let first = scene.tracks[entities[0]].as_ref().ok_or_else(|| Error::Data("missing track".into()))?;
    let mut shape = vec![entities.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * entities.len());
    for &e in entities {
        let tr = scene.tracks[e]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("person {e} has no visible track in scene {}", scene.id)))?;
        data.extend_from_slice(tr.data());
    }
    Ok(Tensor::new(shape, data)?)
}

pub fn sample_context(scene: &Scene, target: usize, s: usize, rng: &mut impl Rng) -> Result<SceneSample> {
    let entities = choose_context(scene, target, s, rng)?;
    let to_usize = |p: usize| scene.labels[p].iter().map(|&v| v as usize).collect::<Vec<_>>();
    Ok(SceneSample {
        scene_id: scene.id,
        video: stack_tracks(scene, &entities)?,
        audio: scene.audio.clone(),
        labels: to_usize(target),
        context_labels: entities[1..].iter().map(|&p| to_usize(p)).collect(),
        entities,
    })
}

/// Distribution scene specs are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDistribution {
    pub people: (usize, usize),
    pub frames: usize,
    pub context_size: usize,
    pub crop: usize,
    pub overlap_prob: (f64, f64),
    pub off_screen_prob: f64,
    pub silence_prob: f64,
    pub snr_db: [f64; 2],
    pub sizes: Vec<FaceSize>,
    pub mean_turn_frames: (f64, f64),
    pub distractor_prob: f64,
    pub pixel_noise: f64,
}

impl SceneDistribution {
    pub fn standard(frames: usize, context_size: usize, crop: usize) -> Self {
        SceneDistribution {
            people: (1, 4),
            frames,
            context_size,
            crop,
            overlap_prob: (0.0, 0.3),
            off_screen_prob: 0.1,
            silence_prob: 0.25,
            snr_db: [5.0, 20.0],
            sizes: FaceSize::all().to_vec(),
            mean_turn_frames: (15.0, 35.0),
            distractor_prob: 0.15,
            pixel_noise: 0.04,
        }
    }

    /// Overlapping speech and small faces only.
    pub fn hard(frames: usize, context_size: usize, crop: usize) -> Self {
        SceneDistribution {
            people: (2, 4),
            overlap_prob: (0.3, 0.5),
            sizes: vec![FaceSize::Small],
            snr_db: [0.0, 10.0],
            distractor_prob: 0.3,
            pixel_noise: 0.08,
            ..Self::standard(frames, context_size, crop)
        }
    }

    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = derive_rng(seed, &[tag("spec")]);
        let p = rng.gen_range(self.people.0..=self.people.1);
        let range = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..hi) } else { lo };
        SceneSpec {
            seed,
            num_people: p,
            context_size: self.context_size,
            frames: self.frames,
            fps: VIDEO_FPS,
            crop: self.crop,
            overlap_prob: range(&mut rng, self.overlap_prob),
            off_screen_prob: self.off_screen_prob,
            silence_prob: self.silence_prob,
            snr_db: self.snr_db,
            face_sizes: (0..p).map(|_| *self.sizes.choose(&mut rng).expect("sizes")).collect(),
            mean_turn_frames: range(&mut rng, self.mean_turn_frames),
            distractor_prob: self.distractor_prob,
            pixel_noise: self.pixel_noise,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(p: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            num_people: p,
            context_size: 3,
            frames: 20,
            fps: 25,
            crop: 16,
            overlap_prob: 0.0,
            off_screen_prob: 0.0,
            silence_prob: 0.0,
            snr_db: [10.0, 10.0],
            face_sizes: vec![FaceSize::Medium; p],
            mean_turn_frames: 8.0,
            distractor_prob: 0.0,
            pixel_noise: 0.02,
        }
    }

    #[test]
    fn one_speaker_per_frame_without_silence_or_overlap() {
        let scene = generate_scene(0, &spec(3, 1)).unwrap();
        for t in 0..20 {
            assert_eq!(scene.labels.iter().map(|l| l[t] as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn speaking_mouths_exceed_noise_floor() {
        let mut s = spec(3, 2);
        s.distractor_prob = 0.5;
        s.silence_prob = 0.4;
        let scene = generate_scene(0, &s).unwrap();
        for p in 0..3 {
            for t in 0..20 {
                if scene.labels[p][t] == 1 {
                    assert!(scene.openness[p][t] > MOUTH_NOISE_FLOOR);
                }
            }
        }
    }

    #[test]
    fn widths_match_size_classes() {
        for size in FaceSize::all() {
            let (lo, hi) = size.width_range();
            assert_eq!(FaceSize::from_width(lo), size);
            assert_eq!(FaceSize::from_width(hi), size);
        }
        assert_eq!(FaceSize::from_width(50), FaceSize::Small);
        assert_eq!(FaceSize::from_width(100), FaceSize::Medium);
        assert_eq!(FaceSize::from_width(200), FaceSize::Large);
    }

    #[test]
    fn lone_target_fills_every_slot() {
        let scene = generate_scene(0, &spec(1, 3)).unwrap();
        let slots = choose_context(&scene, 0, 3, &mut derive_rng(0, &[])).unwrap();
        assert_eq!(slots, vec![0, 0, 0]);
        let scene = generate_scene(0, &spec(2, 3)).unwrap();
        let slots = choose_context(&scene, 1, 3, &mut derive_rng(0, &[])).unwrap();
        assert_eq!(slots, vec![1, 0, 0]);
    }

    #[test]
    fn shapes_and_validation() {
        let scene = generate_scene(0, &spec(2, 4)).unwrap();
        assert_eq!(scene.audio.len(), 20 * 640);
        assert_eq!(scene.tracks[0].as_ref().unwrap().shape(), &[20, 16, 16, 1]);
        let sample = sample_context(&scene, 0, 3, &mut derive_rng(0, &[])).unwrap();
        assert_eq!(sample.video.shape(), &[3, 20, 16, 16, 1]);
        assert_eq!(sample.context_labels.len(), 2);
        let mut bad = spec(2, 4);
        bad.face_sizes.pop();
        assert!(matches!(generate_scene(0, &bad), Err(Error::Config(_))));
        let mut bad = spec(2, 4);
        bad.fps = 30;
        assert!(generate_scene(0, &bad).is_err());
    }
}
