use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dermvit::checkpoint;
use dermvit::data::{self, Dataset, Vocabulary};
use dermvit::heatmap;
use dermvit::model;
use dermvit::synth::{self, SynthConfig};
use dermvit::train::{self, RunConfig, TrainIo};

/// Multi-task vision transformer for skin disease: train, evaluate,
/// cross-validate and inspect attention.
///
/// Every global flag can also be set through the environment with the
/// DERMVIT_ prefix (DERMVIT_CONFIG, DERMVIT_SEED, DERMVIT_THREADS,
/// DERMVIT_OUT_DIR). Log verbosity follows RUST_LOG (default: info).
#[derive(Parser, Debug)]
#[command(name = "dermvit", version)]
struct Cli {
    /// Run configuration (JSON with `model` and `train` sections).
    /// Defaults to the desk preset.
    #[arg(long, global = true, env = "DERMVIT_CONFIG")]
    config: Option<PathBuf>,

    #[arg(long, global = true, env = "DERMVIT_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads; results are reproducible for a fixed count.
    #[arg(long, global = true, env = "DERMVIT_THREADS")]
    threads: Option<usize>,

    #[arg(long, global = true, env = "DERMVIT_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSONL manifest, one record per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Class vocabulary JSON; defaults to vocab.json beside the manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes train_log.jsonl, last/ and best/ under --out-dir.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Held-out manifest for per-epoch validation and best-checkpoint selection.
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Continue from a `last/` checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.json under --out-dir.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Stratified k-fold cross-validation; writes crossval.json.
    Crossval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Attention heatmap for one image.
    Attend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Layer on the disease path: backbone layers first, then the disease head's.
        /// Defaults to the last one.
        #[arg(long)]
        layer: Option<usize>,
        /// Output PNG; defaults to <out-dir>/attention.png.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the score grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check a manifest against its vocabulary and report problems.
    ValidateData {
        #[command(flatten)]
        data: DataArgs,
        /// Decode every image instead of only checking that it exists.
        #[arg(long)]
        decode: bool,
    },
    /// Differential diagnosis for one image as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a synthetic lesion dataset (images, manifest.jsonl, vocab.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
    },
    /// Print the effective run configuration.
    Config,
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    })
}

fn vocab_for(data: &DataArgs) -> Result<Vocabulary> {
    let path = match &data.vocab {
        Some(v) => v.clone(),
        None => data
            .manifest
            .parent()
            .map(|d| d.join("vocab.json"))
            .context("manifest has no parent directory; pass --vocab")?,
    };
    Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_dataset(manifest: &Path, vocab: &Vocabulary, cfg: &RunConfig) -> Result<Dataset> {
    vocab.check_against(&cfg.model)?;
    let (m, _) = data::load_manifest(manifest, vocab)?;
    Ok(Dataset::load(&m, &cfg.model)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let cfg = run_config(cli.config.as_deref())?;
    let out = &cli.out_dir;

    match cli.command {
        Command::Train {
            data,
            val_manifest,
            resume,
        } => {
            let vocab = vocab_for(&data)?;
            let train_set = load_dataset(&data.manifest, &vocab, &cfg)?;
            let val_set = val_manifest
                .as_deref()
                .map(|p| load_dataset(p, &vocab, &cfg))
                .transpose()?;
            let io = TrainIo {
                out_dir: Some(out.clone()),
                resume,
            };
            let outcome = train::train(&cfg, &train_set, val_set.as_ref(), cli.seed, &io)?;
            write_json(&out.join("config.json"), &cfg)?;
            let hash = checkpoint::checkpoint_hash(&checkpoint::last_dir(out))?;
            println!(
                "{}",
                serde_json::json!({
                    "epochs": outcome.state.epochs_done,
                    "steps": outcome.state.step_count,
                    "best_f1": outcome.state.best_f1,
                    "best_epoch": outcome.state.best_epoch,
                    "checkpoint": checkpoint::last_dir(out),
                    "sha256": hash,
                })
            );
        }
        Command::Eval { checkpoint: ckpt, data } => {
            let w = checkpoint::load(&ckpt)?;
            let cfg = RunConfig {
                model: w.config.clone(),
                train: cfg.train,
            };
            let vocab = vocab_for(&data)?;
            let set = load_dataset(&data.manifest, &vocab, &cfg)?;
            let report = train::evaluate(&w, &set, cfg.train.thresholds)?;
            write_json(&out.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Crossval { data, folds } => {
            let vocab = vocab_for(&data)?;
            let set = load_dataset(&data.manifest, &vocab, &cfg)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let report = train::crossval(&cfg, &set, folds, cli.seed, Some(out))?;
            for (k, v) in &report.summary {
                println!("{k:<22} {v}");
            }
            if !report.failures.is_empty() {
                bail!("{} of {folds} folds failed; see crossval.json", report.failures.len());
            }
        }
        Command::Attend {
            checkpoint: ckpt,
            image,
            layer,
            out: png,
            csv,
        } => {
            let w = checkpoint::load(&ckpt)?;
            let img = data::load_image(&image, w.config.image_height, w.config.image_width)?;
            let layer = layer.unwrap_or(w.config.backbone_layers + w.config.head_layers - 1);
            let png = png.unwrap_or_else(|| out.join("attention.png"));
            if let Some(dir) = png.parent() {
                fs::create_dir_all(dir)?;
            }
            heatmap::export_attention(&w, &img, layer, &png, csv.as_deref())?;
            println!("{}", png.display());
        }
        Command::ValidateData { data, decode } => {
            let vocab = vocab_for(&data)?;
            let (_, report) = data::scan_manifest(&data.manifest, &vocab, decode)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.is_ok() {
                bail!("{} problem(s) in {}", report.errors().count(), data.manifest.display());
            }
        }
        Command::Infer {
            checkpoint: ckpt,
            image,
            vocab,
        } => {
            let w = checkpoint::load(&ckpt)?;
            let vocab = vocab.map(|p| Vocabulary::load(&p)).transpose()?;
            let img = data::load_image(&image, w.config.image_height, w.config.image_width)?;
            let d = model::infer(&img, &w, cfg.train.thresholds, vocab.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&d)?);
        }
        Command::Synth { out: dir, count } => {
            let m = &cfg.model;
            let samples = synth::generate(&SynthConfig {
                num_images: count,
                height: m.image_height,
                width: m.image_width,
                patch_size: m.patch_size,
                seed: cli.seed,
                ..Default::default()
            })?;
            let manifest = synth::write_dataset(&dir, &samples)?;
            println!("{} images in {}", manifest.len(), dir.display());
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}
