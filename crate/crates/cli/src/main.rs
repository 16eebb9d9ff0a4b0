use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loconet_core::dataset::{load_dataset, read_scene};
use loconet_core::error::IoContext;
use loconet_core::pipeline::{self, Axis};
use loconet_core::{Error, Result, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "loconet", version, about = "Active speaker detection on synthetic conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory; overrides the configured one.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint file; overrides the configured one.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Trains a model and keeps the checkpoint with the best validation mAP.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Scores a dataset split and writes predictions and a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Per-entity logits for one scene directory.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Scene directory as written by `generate`.
        #[arg(long)]
        scene: PathBuf,
        /// Encode each entity once and reuse it whenever it appears as context.
        #[arg(long)]
        reuse_features: bool,
    },
    /// Trains and evaluates one run per value of a configuration axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of T, S, k, N, sim_kind, use_lim, use_sim.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    All,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.checkpoint = c.clone();
    }
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text + "\n").at(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            pipeline::generate(&cfg, &out)?;
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "runs/train");
            let data = load_dataset(&cfg.dataset)?;
            let summary = pipeline::train(&cfg, &data, &out)?;
            log::info!(
                "best val mAP {} at epoch {}; checkpoint {}",
                summary.best_map.map_or("n/a".into(), |m| format!("{m:.4}")),
                summary.best_epoch,
                summary.checkpoint.display()
            );
        }
        Command::Eval { common, split } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "runs/eval");
            let data = load_dataset(&cfg.dataset)?;
            let model = pipeline::load_model(&cfg, &cfg.checkpoint)?;
            let scenes: Vec<_> = match split {
                SplitArg::Train => data.train,
                SplitArg::Val => data.val,
                SplitArg::All => data.train.into_iter().chain(data.val).collect(),
            };
            let (records, report) = pipeline::evaluate_model(&model, &scenes, &cfg)?;
            pipeline::write_eval(&out, &records, report.as_ref())?;
            match report {
                Some(r) => eprint!("{}", r.to_text()),
                None => log::warn!("no positive frames; only predictions were written"),
            }
        }
        Command::Infer { common, scene, reuse_features } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "runs/infer");
            let model = pipeline::load_model(&cfg, &cfg.checkpoint)?;
            let scene = read_scene(&scene)?;
            let result = pipeline::infer(&model, &scene, cfg.frames, cfg.seed, reuse_features)?;
            std::fs::create_dir_all(&out).at(&out)?;
            write_json(&out.join("infer.json"), &result)?;
        }
        Command::Ablate { common, axis, values, seeds } => {
            let axis: Axis = axis.parse()?;
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "runs/ablate");
            let data = load_dataset(&cfg.dataset)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let rows = pipeline::ablate(&cfg, &data, axis, &values, &seeds, &out)?;
            for r in rows {
                eprintln!("{}={}: mAP {:.4} ± {:.4} over {} runs", r.axis, r.value, r.map_mean, r.map_std, r.maps.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
