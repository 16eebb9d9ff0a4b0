//! Dataset generation, training, evaluation, inference with feature reuse
//! and ablation sweeps.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use loconet_tensor::rng::{derive_rng, tag};
use loconet_tensor::{Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, ROWS_PER_FRAME};
use crate::config::RunConfig;
use crate::conversim::augment::augment;
use crate::conversim::{choose_context, sample_context, Scene};
use crate::dataset::{generate_scenes, write_dataset, Dataset, Manifest};
use crate::error::{Error, IoContext, Result};
use crate::lscm::deep_supervision_loss;
use crate::metrics::{evaluate, write_csv, EvalReport, PredictionRecord};
use crate::model::{frame_scores, LoCoNet};

/// Generates the configured dataset under `out`.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let dist = cfg.scene_distribution();
    let (train, val) = generate_scenes(&dist, cfg.seed, cfg.train_scenes, cfg.val_scenes)?;
    let manifest = write_dataset(out, &cfg.split.to_string(), cfg.seed, &train, &val)?;
    log::info!(
        "wrote {} train and {} val scenes to {} (train prevalence {:.3})",
        train.len(),
        val.len(),
        out.display(),
        manifest.train_stats.prevalence
    );
    Ok(manifest)
}

/// Non-overlapping windows `(start, len)` of at most `window` frames.
pub fn windows(frames: usize, window: usize) -> Vec<(usize, usize)> {
    let window = window.max(1);
    (0..frames).step_by(window).map(|s| (s, window.min(frames - s))).collect()
}

/// Frames `start .. start + len` of every track in `[S, T, H, W, 1]`.
pub fn slice_frames(video: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = video.shape();
    if s.len() != 5 || start + len > s[1] {
        return Err(Error::Shape(format!("cannot take frames {start}..{} of {s:?}", start + len)));
    }
    let frame = s[2] * s[3] * s[4];
    let mut data = Vec::with_capacity(s[0] * len * frame);
    for n in 0..s[0] {
        let base = (n * s[1] + start) * frame;
        data.extend_from_slice(&video.data()[base..base + len * frame]);
    }
    Ok(Tensor::new(vec![s[0], len, s[2], s[3], s[4]], data)?)
}

/// Spectrogram rows of frames `start .. start + len`.
pub fn slice_mel(mel: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let m = mel.shape()[1];
    let (a, b) = (start * ROWS_PER_FRAME, (start + len) * ROWS_PER_FRAME);
    if b > mel.shape()[0] {
        return Err(Error::Shape(format!("cannot take rows {a}..{b} of {:?}", mel.shape())));
    }
    Ok(Tensor::new(vec![b - a, m], mel.data()[a * m..b * m].to_vec())?)
}

/// Visual embeddings keyed by `(scene, entity, start, len)`.
///
/// With reuse disabled nothing is stored, so every request runs the encoder.
#[derive(Debug, Default)]
pub struct FeatureCache {
    reuse: bool,
    visual: HashMap<(usize, usize, usize, usize), Tensor>,
    audio: HashMap<(usize, usize, usize), Tensor>,
    invocations: usize,
}

impl FeatureCache {
    pub fn new(reuse: bool) -> Self {
        FeatureCache { reuse, ..Default::default() }
    }

    /// Face tracks passed through the visual encoder so far.
    pub fn invocations(&self) -> usize {
        self.invocations
    }

    /// `[len, C]` embedding of one entity's frames.
    pub fn visual(&mut self, model: &LoCoNet, scene: &Scene, entity: usize, start: usize, len: usize) -> Result<Tensor> {
        let key = (scene.id, entity, start, len);
        if let Some(t) = self.visual.get(&key) {
            return Ok(t.clone());
        }
        let track = scene.tracks[entity]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("person {entity} is not visible in scene {}", scene.id)))?;
        let mut shape = vec![1];
        shape.extend_from_slice(track.shape());
        let video = slice_frames(&track.reshape(shape)?, start, len)?;
        let mut g = Graph::inference();
        let v = model.encode_visual(&mut g, &video)?;
        let c = g.shape(v)[2];
        let out = g.value(v).reshape(vec![len, c])?;
        self.invocations += 1;
        if self.reuse {
            self.visual.insert(key, out.clone());
        }
        Ok(out)
    }

    fn audio(&mut self, model: &LoCoNet, scene_id: usize, mel: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let key = (scene_id, start, len);
        if let Some(t) = self.audio.get(&key) {
            return Ok(t.clone());
        }
        let mut g = Graph::inference();
        let a = model.encode_audio(&mut g, &slice_mel(mel, start, len)?)?;
        let out = g.value(a).clone();
        if self.reuse {
            self.audio.insert(key, out.clone());
        }
        Ok(out)
    }
}

/// Final-block logits of one entity over the whole scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLogits {
    pub entity: usize,
    /// Context slots used; slot 0 is the entity itself.
    pub context: Vec<usize>,
    /// `[logit₀, logit₁]` per frame.
    pub logits: Vec<[f64; 2]>,
}

/// Context slots used at evaluation time, fixed by `(seed, scene, entity)`.
pub fn eval_context(scene: &Scene, entity: usize, speakers: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = derive_rng(seed, &[tag("eval-context"), scene.id as u64, entity as u64]);
    choose_context(scene, entity, speakers, &mut rng)
}

/// Predicts every visible entity of `scene` as the target in turn, in
/// windows of `window` frames.
pub fn scene_logits(
    model: &LoCoNet,
    scene: &Scene,
    mel: &Tensor,
    window: usize,
    seed: u64,
    cache: &mut FeatureCache,
) -> Result<Vec<EntityLogits>> {
    let speakers = model.speakers();
    let mut out = Vec::new();
    for entity in scene.visible() {
        let context = eval_context(scene, entity, speakers, seed)?;
        let mut logits = Vec::with_capacity(scene.frames());
        for (start, len) in windows(scene.frames(), window) {
            let mut local: HashMap<usize, Tensor> = HashMap::new();
            let mut rows = Vec::with_capacity(speakers * len * model.config.lscm.channels);
            for &e in &context {
                if !local.contains_key(&e) {
                    local.insert(e, cache.visual(model, scene, e, start, len)?);
                }
                rows.extend_from_slice(local[&e].data());
            }
            let c = model.config.lscm.channels;
            let mut g = Graph::inference();
            let f_v = g.constant(Tensor::new(vec![speakers, len, c], rows)?);
            let fa = cache.audio(model, scene.id, mel, start, len)?;
            let f_a = g.constant(fa);
            let all = model.forward_features(&mut g, f_v, f_a)?;
            let last = g.value(*all.last().expect("at least one logit array"));
            logits.extend(last.data().chunks_exact(2).map(|r| [r[0], r[1]]));
        }
        out.push(EntityLogits { entity, context, logits });
    }
    Ok(out)
}

/// Scores every visible entity frame of every scene.
pub fn predict(model: &LoCoNet, scenes: &[Scene], window: usize, seed: u64) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for scene in scenes {
        let mel = model.spectrogram(&scene.audio, scene.frames())?;
        let mut cache = FeatureCache::new(true);
        for el in scene_logits(model, scene, &mel, window, seed, &mut cache)? {
            let flat = Tensor::new(vec![el.logits.len(), 2], el.logits.iter().flatten().copied().collect())?;
            for (f, score) in frame_scores(&flat).into_iter().enumerate() {
                records.push(PredictionRecord {
                    scene_id: scene.id,
                    frame_index: f,
                    entity_id: el.entity,
                    score,
                    label: scene.labels[el.entity][f],
                    face_width: scene.people[el.entity].face_width,
                    faces_visible: scene.faces_visible(),
                });
            }
        }
    }
    Ok(records)
}

/// Predictions and report for `scenes`; the report is absent when no frame
/// is positive.
pub fn evaluate_model(model: &LoCoNet, scenes: &[Scene], cfg: &RunConfig) -> Result<(Vec<PredictionRecord>, Option<EvalReport>)> {
    let records = predict(model, scenes, cfg.frames, cfg.seed)?;
    let report = if records.iter().any(|r| r.label == 1) { Some(evaluate(&records)?) } else { None };
    Ok((records, report))
}

/// Writes `predictions.csv`, `report.json` and `report.txt` into `out`.
pub fn write_eval(out: &Path, records: &[PredictionRecord], report: Option<&EvalReport>) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    let csv_path = out.join("predictions.csv");
    let f = fs::File::create(&csv_path).at(&csv_path)?;
    write_csv(std::io::BufWriter::new(f), records)?;
    if let Some(report) = report {
        let json_path = out.join("report.json");
        let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(&json_path, e))?;
        fs::write(&json_path, json + "\n").at(&json_path)?;
        let txt = out.join("report.txt");
        fs::write(&txt, report.to_text()).at(&txt)?;
    }
    Ok(())
}

/// One supervised example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video: Tensor,
    pub mel: Tensor,
    pub labels: Vec<usize>,
}

/// Draws a random visible target with its context, augments it and cuts a
/// random window of `cfg.frames` frames.
pub fn training_example(
    model: &LoCoNet,
    cfg: &RunConfig,
    scene: &Scene,
    pool: &[&Waveform],
    rng: &mut impl Rng,
) -> Result<TrainExample> {
    let visible = scene.visible();
    let target = *visible.choose(rng).ok_or_else(|| Error::Data(format!("scene {} has no visible person", scene.id)))?;
    let sample = sample_context(scene, target, model.speakers(), rng)?;
    let sample = augment(&sample, pool, &cfg.augment_config(), rng)?;
    let frames = scene.frames();
    let len = cfg.frames.min(frames);
    let start = if len < frames { rng.gen_range(0..=frames - len) } else { 0 };
    let mel = model.spectrogram(&sample.audio, frames)?;
    Ok(TrainExample {
        video: slice_frames(&sample.video, start, len)?,
        mel: slice_mel(&mel, start, len)?,
        labels: sample.labels[start..start + len].to_vec(),
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Mean loss of the first batch, before any update.
    pub initial_loss: f64,
    /// Loss of every example in training order.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_map: Option<f64>,
    pub checkpoint: PathBuf,
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn non_finite_diagnostic(model: &LoCoNet, g: &Graph, logits: &[loconet_tensor::Var]) -> String {
    if let Some((_, name, _)) = model.store.iter().find(|(_, _, t)| !t.all_finite()) {
        return format!("parameter `{name}` holds a non-finite value");
    }
    if let Some(i) = logits.iter().position(|&l| !g.value(l).all_finite()) {
        return format!("logits of block {} are non-finite", i + 1);
    }
    "loss is non-finite".to_string()
}

/// Trains a fresh model on `data.train`, selecting the checkpoint with the
/// best validation mAP. Writes `train_log.csv`, `config.txt` and the
/// checkpoint into `out`.
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("{} has no training scenes", data.root.display())));
    }
    fs::create_dir_all(out).at(out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).at(&cfg_path)?;
    let checkpoint = resolve(out, &cfg.checkpoint);

    let mut model = LoCoNet::new(cfg.model_config(), cfg.seed)?;
    log::info!("model has {} parameters", model.store.num_elements());
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let batch = cfg.batch_size;
    let mut lr = cfg.lr;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut initial_loss = None;
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        adam.set_lr(lr);
        let mut rng = derive_rng(cfg.seed, &[tag("train"), epoch as u64]);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            model.store.zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let scene = &data.train[i];
                let pool: Vec<&Waveform> =
                    data.train.iter().filter(|s| s.id != scene.id).map(|s| &s.audio).collect();
                let ex = training_example(&model, cfg, scene, &pool, &mut rng)?;
                let mut g = Graph::new();
                let logits = model.forward(&mut g, &ex.video, &ex.mel)?;
                let loss = deep_supervision_loss(&mut g, &logits, &ex.labels)?;
                let value = g.value(loss).item().ok_or_else(|| Error::Shape("loss is not a scalar".into()))?;
                if !value.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite loss at epoch {epoch}, scene {}: {}",
                        scene.id,
                        non_finite_diagnostic(&model, &g, &logits)
                    )));
                }
                let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                g.backward(scaled)?.accumulate_into(&mut model.store)?;
                batch_loss += value;
                step_losses.push(value);
            }
            if initial_loss.is_none() {
                initial_loss = Some(batch_loss / chunk.len() as f64);
            }
            epoch_loss += batch_loss;
            adam.step(&mut model.store)?;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let (_, report) = evaluate_model(&model, &data.val, cfg)?;
        let val_map = report.as_ref().map(|r| r.map);
        let val_auc = report.as_ref().and_then(|r| r.auc);
        log::info!(
            "epoch {epoch}/{}: lr {lr:.3e}, train loss {train_loss:.4}, val mAP {}, {:.1}s",
            cfg.epochs,
            val_map.map_or("n/a".into(), |m| format!("{m:.4}")),
            started.elapsed().as_secs_f64()
        );
        epochs.push(EpochLog { epoch, lr, train_loss, val_map, val_auc });
        let improved = match (val_map, best) {
            (Some(m), Some((b, _))) => m > b,
            (Some(_), None) => true,
            (None, _) => best.is_none(),
        };
        if improved {
            best = Some((val_map.unwrap_or(f64::NEG_INFINITY), epoch));
            model.save(&checkpoint)?;
        }
        lr *= cfg.lr_decay;
    }

    write_train_log(&out.join("train_log.csv"), &epochs)?;
    let (best_map, best_epoch) = best.map_or((None, 0), |(m, e)| (m.is_finite().then_some(m), e));
    Ok(TrainSummary {
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        step_losses,
        epochs,
        best_epoch,
        best_map,
        checkpoint,
    })
}

fn write_train_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("epoch,lr,train_loss,val_map,val_auc\n");
    for e in epochs {
        s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.lr, e.train_loss, opt(e.val_map), opt(e.val_auc)));
    }
    fs::write(path, s).at(path)
}

/// Loads a model for `cfg` from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<LoCoNet> {
    let mut model = LoCoNet::new(cfg.model_config(), cfg.seed)?;
    model.load(checkpoint)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub scene_id: usize,
    pub reuse_features: bool,
    pub encoder_invocations: usize,
    pub entities: Vec<EntityLogits>,
}

/// Per-entity logits of one scene, optionally reusing visual features.
pub fn infer(model: &LoCoNet, scene: &Scene, window: usize, seed: u64, reuse: bool) -> Result<InferResult> {
    let mel = model.spectrogram(&scene.audio, scene.frames())?;
    let mut cache = FeatureCache::new(reuse);
    let entities = scene_logits(model, scene, &mel, window, seed, &mut cache)?;
    log::info!(
        "scene {}: {} visual encoder invocations ({} reuse)",
        scene.id,
        cache.invocations(),
        if reuse { "with" } else { "without" }
    );
    Ok(InferResult { scene_id: scene.id, reuse_features: reuse, encoder_invocations: cache.invocations(), entities })
}

/// Configuration axes that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    T,
    S,
    K,
    N,
    SimKind,
    UseLim,
    UseSim,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "T" => Axis::T,
            "S" => Axis::S,
            "k" => Axis::K,
            "N" => Axis::N,
            "sim_kind" => Axis::SimKind,
            "use_lim" => Axis::UseLim,
            "use_sim" => Axis::UseSim,
            _ => return Err(Error::Usage(format!("unknown ablation axis `{s}` (T, S, k, N, sim_kind, use_lim, use_sim)"))),
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::T => "T",
            Axis::S => "S",
            Axis::K => "k",
            Axis::N => "N",
            Axis::SimKind => "sim_kind",
            Axis::UseLim => "use_lim",
            Axis::UseSim => "use_sim",
        }
    }

    /// Configuration key the axis sets.
    pub fn key(self) -> &'static str {
        match self {
            Axis::T => "frames",
            Axis::S => "speakers",
            Axis::K => "k",
            Axis::N => "blocks",
            Axis::SimKind => "sim_kind",
            Axis::UseLim => "use_lim",
            Axis::UseSim => "use_sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seeds: Vec<u64>,
    /// Best validation mAP of each seed's run.
    pub maps: Vec<f64>,
    pub map_mean: f64,
    pub map_std: f64,
}

/// Trains and evaluates one run per `(value, seed)` and writes
/// `ablation_<axis>.csv` into `out`.
pub fn ablate(cfg: &RunConfig, data: &Dataset, axis: Axis, values: &[String], seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one value and one seed".into()));
    }
    let mut rows = Vec::new();
    for value in values {
        let mut run_cfg = cfg.clone();
        run_cfg.set(axis.key(), value)?;
        run_cfg.validate()?;
        let mut maps = Vec::new();
        for &seed in seeds {
            run_cfg.seed = seed;
            let dir = out.join(format!("{}_{}_seed{}", axis.name(), value, seed));
            let summary = train(&run_cfg, data, &dir)?;
            let map = summary
                .best_map
                .ok_or_else(|| Error::Data("validation split has no positive frames".into()))?;
            log::info!("{}={value} seed {seed}: val mAP {map:.4}", axis.name());
            maps.push(map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maps.len() as f64;
        rows.push(AblationRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            seeds: seeds.to_vec(),
            maps,
            map_mean: mean,
            map_std: var.sqrt(),
        });
    }
    write_ablation_csv(&out.join(format!("ablation_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut s = String::from("axis,value,runs,map_mean,map_std,maps\n");
    for r in rows {
        let maps = r.maps.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(";");
        s.push_str(&format!("{},{},{},{},{},{}\n", r.axis, r.value, r.maps.len(), r.map_mean, r.map_std, maps));
    }
    fs::write(path, s).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_frames() {
        assert_eq!(windows(10, 4), vec![(0, 4), (4, 4), (8, 2)]);
        assert_eq!(windows(4, 8), vec![(0, 4)]);
    }

    #[test]
    fn slicing() {
        let v = Tensor::from_fn([2, 4, 1, 1, 1], |i| ((i / 4) * 10 + i % 4) as f64);
        let s = slice_frames(&v, 1, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 11.0, 12.0]);
        assert!(slice_frames(&v, 3, 2).is_err());
        let mel = Tensor::from_fn([8, 2], |i| i as f64);
        assert_eq!(slice_mel(&mel, 1, 1).unwrap().data(), &[8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("k".parse::<Axis>().unwrap(), Axis::K);
        assert!(matches!("depth".parse::<Axis>(), Err(Error::Usage(_))));
    }
}
