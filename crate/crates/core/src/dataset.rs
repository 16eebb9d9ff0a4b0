//! On-disk datasets: one directory per scene plus a manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scene_00000/scene.json   spec, people, labels, mouth openness
//! <root>/scene_00000/audio.wav    PCM16 mono 16 kHz
//! <root>/scene_00000/tracks.bin   face tracks in the checkpoint tensor format
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use loconet_tensor::checkpoint::{read_tensors, write_tensors};
use loconet_tensor::rng::{derive_rng, tag};
use loconet_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::conversim::{generate_scene, Person, Scene, SceneDistribution, SceneSpec};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: usize,
    pub spec: SceneSpec,
    pub people: Vec<Person>,
    pub labels: Vec<Vec<u8>>,
    pub openness: Vec<Vec<f64>>,
    pub faces_visible: usize,
}

/// Speaking statistics of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakingStats {
    pub scenes: usize,
    pub frames: usize,
    /// Frames where at least one person speaks.
    pub speaking_frames: usize,
    pub speaking_fraction: f64,
    /// Frames of visible people, the unit evaluation scores.
    pub visible_entity_frames: usize,
    pub visible_positive_frames: usize,
    /// Positive share of visible entity frames: the chance-level mAP.
    pub prevalence: f64,
}

impl SpeakingStats {
    pub fn compute(scenes: &[&Scene]) -> Self {
        let mut s = SpeakingStats {
            scenes: scenes.len(),
            frames: 0,
            speaking_frames: 0,
            speaking_fraction: 0.0,
            visible_entity_frames: 0,
            visible_positive_frames: 0,
            prevalence: 0.0,
        };
        for sc in scenes {
            let t = sc.frames();
            s.frames += t;
            s.speaking_frames += (0..t).filter(|&f| sc.labels.iter().any(|l| l[f] == 1)).count();
            for p in sc.visible() {
                s.visible_entity_frames += t;
                s.visible_positive_frames += sc.labels[p].iter().filter(|&&v| v == 1).count();
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        s.speaking_fraction = ratio(s.speaking_frames, s.frames);
        s.prevalence = ratio(s.visible_positive_frames, s.visible_entity_frames);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub split: String,
    /// Scene directory names.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub train_stats: SpeakingStats,
    pub val_stats: SpeakingStats,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

pub fn scene_dir_name(id: usize) -> String {
    format!("scene_{id:05}")
}

/// Seed of scene `index` within a split; independent of every other scene.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    derive_rng(seed, &[tag("scene"), tag(split), index as u64]).gen()
}

/// Generates the train and val scenes in memory. Ids run over train first.
pub fn generate_scenes(dist: &SceneDistribution, seed: u64, n_train: usize, n_val: usize) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let make = |split: &str, offset: usize, n: usize| -> Result<Vec<Scene>> {
        (0..n).map(|i| generate_scene(offset + i, &dist.sample(scene_seed(seed, split, i)))).collect()
    };
    Ok((make("train", 0, n_train)?, make("val", n_train, n_val)?))
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let file = SceneFile {
        id: scene.id,
        spec: scene.spec.clone(),
        people: scene.people.clone(),
        labels: scene.labels.clone(),
        openness: scene.openness.clone(),
        faces_visible: scene.faces_visible(),
    };
    let json_path = dir.join("scene.json");
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::format(&json_path, e))?;
    fs::write(&json_path, json + "\n").at(&json_path)?;
    scene.audio.write_wav(&dir.join("audio.wav"))?;
    let tracks: Vec<(String, Tensor)> = scene
        .tracks
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.as_ref().map(|t| (format!("person{p}"), t.clone())))
        .collect();
    let bin = dir.join("tracks.bin");
    let f = fs::File::create(&bin).at(&bin)?;
    write_tensors(std::io::BufWriter::new(f), &tracks).map_err(|e| Error::format(&bin, e))?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let json_path = dir.join("scene.json");
    let text = fs::read_to_string(&json_path).at(&json_path)?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e))?;
    let audio = Waveform::read_wav(&dir.join("audio.wav"))?;
    let bin = dir.join("tracks.bin");
    let f = fs::File::open(&bin).at(&bin)?;
    let stored = read_tensors(std::io::BufReader::new(f)).map_err(|e| Error::format(&bin, e))?;
    let mut tracks: Vec<Option<Tensor>> = vec![None; file.people.len()];
    for (name, t) in stored {
        let p: usize = name
            .strip_prefix("person")
            .and_then(|v| v.parse().ok())
            .filter(|&p| p < file.people.len())
            .ok_or_else(|| Error::format(&bin, format!("unexpected track `{name}`")))?;
        tracks[p] = Some(t);
    }
    let spec = &file.spec;
    for (p, person) in file.people.iter().enumerate() {
        let expect = [spec.frames, spec.crop, spec.crop, 1];
        match &tracks[p] {
            Some(t) if t.shape() != expect => {
                return Err(Error::format(&bin, format!("track of person {p} has shape {:?}, expected {expect:?}", t.shape())))
            }
            None if person.visible => return Err(Error::format(&bin, format!("missing track for visible person {p}"))),
            _ => {}
        }
    }
    if file.labels.len() != file.people.len() || file.labels.iter().any(|l| l.len() != spec.frames) {
        return Err(Error::format(&json_path, "labels do not cover every person and frame"));
    }
    if audio.len() != spec.samples() {
        return Err(Error::format(dir.join("audio.wav"), format!("{} samples, expected {}", audio.len(), spec.samples())));
    }
    Ok(Scene { id: file.id, spec: file.spec, people: file.people, labels: file.labels, openness: file.openness, audio, tracks })
}

/// Writes a generated dataset and returns its manifest.
pub fn write_dataset(root: &Path, split: &str, seed: u64, train: &[Scene], val: &[Scene]) -> Result<Manifest> {
    fs::create_dir_all(root).at(root)?;
    for sc in train.iter().chain(val) {
        write_scene(&root.join(scene_dir_name(sc.id)), sc)?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        seed,
        split: split.to_string(),
        train: train.iter().map(|s| scene_dir_name(s.id)).collect(),
        val: val.iter().map(|s| scene_dir_name(s.id)).collect(),
        train_stats: SpeakingStats::compute(&train.iter().collect::<Vec<_>>()),
        val_stats: SpeakingStats::compute(&val.iter().collect::<Vec<_>>()),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, json + "\n").at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{}: dataset format {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let load = |names: &[String]| names.iter().map(|n| read_scene(&root.join(n))).collect::<Result<Vec<_>>>();
    let train = load(&manifest.train)?;
    let val = load(&manifest.val)?;
    Ok(Dataset { root: root.to_path_buf(), manifest, train, val })
}
