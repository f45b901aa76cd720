//! Training loop, evaluation and cross-validation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainState};
use crate::config::{ModelConfig, Task};
use crate::data::{epoch_batches, kfold_split, Augment, Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, MeanStd, MetricsReport};
use crate::model::{self, LossBreakdown, ModelWeights, Prediction, Thresholds};
use crate::optim::{cosine_lr, sgd_step_with_lr, OptimizerState, SgdConfig};
use crate::tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub augment: Augment,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Cosine learning-rate decay over the whole run.
    pub cosine: bool,
    pub thresholds: Thresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            sgd: SgdConfig::default(),
            augment: Augment::default(),
            max_steps: None,
            cosine: false,
            thresholds: Thresholds::default(),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.sgd.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Mean of the per-batch losses.
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub optimizer: OptimizerState<f32>,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

/// Where training writes checkpoints and logs; everything is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by [`checkpoint::save_training`].
    pub resume: Option<PathBuf>,
}

/// Mean loss and gradients of one batch. Samples run in parallel; their
/// gradients are summed in sample order so the result does not depend on
/// the thread count.
pub fn batch_gradients(w: &ModelWeights<f32>, batch: &Batch) -> Result<(LossBreakdown, Vec<Array2<f32>>)> {
    let scale = 1.0 / batch.len() as f32;
    let per_sample: Vec<(LossBreakdown, Vec<Array2<f32>>)> = batch
        .images
        .par_iter()
        .zip(batch.targets.par_iter())
        .map(|(img, t)| model::sample_gradients(w, img, t, scale))
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Config("empty batch".into()))?;
    for (l, g) in iter {
        loss = loss.add(&l);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grads))
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(path, e))
}

/// Trains from `seed` (or resumes), evaluating on `val` after every epoch.
pub fn train(cfg: &RunConfig, data: &Dataset, val: Option<&Dataset>, seed: u64, io: &TrainIo) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let tc = &cfg.train;
    let (mut w, mut opt, mut state) = match &io.resume {
        Some(dir) => {
            let (w, opt, state) = checkpoint::load_training(dir)?;
            if w.config != cfg.model {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different model config".into(),
                ));
            }
            if state.seed != seed {
                log::warn!("resuming with seed {seed}, checkpoint was seeded with {}", state.seed);
            }
            (w, opt, state)
        }
        None => {
            let w = ModelWeights::<f32>::init(&cfg.model, seed)?;
            let opt = OptimizerState::new(&w, tc.sgd)?;
            let state = TrainState {
                seed,
                epochs_done: 0,
                step_count: 0,
                sgd: tc.sgd,
                best_f1: None,
                best_epoch: None,
            };
            (w, opt, state)
        }
    };
    if let Some(out) = &io.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        if io.resume.is_none() {
            checkpoint::save_training(&checkpoint::last_dir(out), &w, &opt, &state)?;
            checkpoint::save(&checkpoint::best_dir(out), &w)?;
        }
    }
    let batches_per_epoch = data.len().div_ceil(tc.batch_size) as u64;
    let total_steps = tc
        .max_steps
        .map(|m| m as u64)
        .unwrap_or(batches_per_epoch * tc.epochs as u64);
    let mut log_entries = Vec::new();

    for epoch in state.epochs_done..tc.epochs {
        if tc.max_steps.is_some_and(|m| opt.step_count >= m as u64) {
            break;
        }
        let batches = epoch_batches(
            data,
            tc.batch_size,
            cfg.model.num_diseases,
            &tc.augment,
            seed,
            epoch as u64,
        );
        let mut loss_sum = LossBreakdown::default();
        let mut n_batches = 0usize;
        let mut lr = tc.sgd.lr;
        for batch in &batches {
            if tc.max_steps.is_some_and(|m| opt.step_count >= m as u64) {
                break;
            }
            let (loss, grads) = batch_gradients(&w, batch)?;
            lr = if tc.cosine {
                cosine_lr(tc.sgd.lr, opt.step_count, total_steps)
            } else {
                tc.sgd.lr
            };
            sgd_step_with_lr(&mut w, &grads, &mut opt, lr)?;
            loss_sum = loss_sum.add(&loss);
            n_batches += 1;
        }
        let val_report = val.map(|v| evaluate(&w, v, tc.thresholds)).transpose()?;
        state.epochs_done = epoch + 1;
        state.step_count = opt.step_count;
        let mut improved = false;
        if let Some(r) = &val_report {
            if state.best_f1.is_none_or(|b| r.disease.f1 > b) {
                state.best_f1 = Some(r.disease.f1);
                state.best_epoch = Some(epoch + 1);
                improved = true;
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            steps: opt.step_count,
            lr,
            loss: loss_sum.scaled(1.0 / n_batches.max(1) as f64),
            val: val_report,
        };
        log::info!(
            "epoch {} step {} loss {:.4}{}",
            entry.epoch,
            entry.steps,
            entry.loss.total,
            entry
                .val
                .as_ref()
                .map(|v| format!(" val F1 {:.1} acc {:.1}", v.disease.f1, v.disease.accuracy))
                .unwrap_or_default()
        );
        if let Some(out) = &io.out_dir {
            append_log(&out.join("train_log.jsonl"), &entry)?;
            checkpoint::save_training(&checkpoint::last_dir(out), &w, &opt, &state)?;
            if improved || val.is_none() {
                checkpoint::save(&checkpoint::best_dir(out), &w)?;
            }
        }
        log_entries.push(entry);
    }
    Ok(TrainOutcome {
        weights: w,
        optimizer: opt,
        state,
        log: log_entries,
    })
}

/// Forward passes over a dataset, in dataset order.
pub fn predict_all(w: &ModelWeights<f32>, data: &Dataset) -> Result<Vec<Prediction<f32>>> {
    data.images.par_iter().map(|img| model::forward(img, w)).collect()
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn threshold(logits: &[f32], t: f64) -> Vec<u8> {
    logits
        .iter()
        .map(|&z| u8::from(tensor::sigmoid(z) as f64 >= t))
        .collect()
}

/// Metrics of predictions against a dataset's labels.
pub fn score(preds: &[Prediction<f32>], data: &Dataset, cfg: &ModelConfig, t: Thresholds) -> Result<MetricsReport> {
    let truth: Vec<usize> = data.diseases();
    let predicted: Vec<usize> = preds.iter().map(|p| argmax(&p.disease_logits_fused)).collect();
    let (disease, confusion) = metrics::multiclass(&predicted, &truth, cfg.num_diseases)?;
    let body_part = if cfg.has(Task::BodyPart) {
        let p: Vec<Vec<u8>> = preds
            .iter()
            .map(|p| threshold(p.body_part_logits.as_deref().unwrap_or_default(), t.body_part))
            .collect();
        let y: Vec<Vec<u8>> = data.labels.iter().map(|l| l.body_parts.clone()).collect();
        Some(metrics::multilabel("body_part", &p, &y)?)
    } else {
        None
    };
    let attribute = if cfg.has(Task::Attribute) {
        let p: Vec<Vec<u8>> = preds
            .iter()
            .map(|p| threshold(p.attribute_logits.as_deref().unwrap_or_default(), t.attribute))
            .collect();
        let y: Vec<Vec<u8>> = data.labels.iter().map(|l| l.attributes.clone()).collect();
        Some(metrics::multilabel("attribute", &p, &y)?)
    } else {
        None
    };
    Ok(MetricsReport {
        fold: None,
        samples: data.len(),
        disease,
        confusion,
        body_part,
        attribute,
    })
}

pub fn evaluate(w: &ModelWeights<f32>, data: &Dataset, t: Thresholds) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    score(&predict_all(w, data)?, data, &w.config, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<MetricsReport>,
    pub failures: Vec<FoldFailure>,
    pub summary: std::collections::BTreeMap<String, MeanStd>,
}

impl CrossvalReport {
    pub fn from_folds(folds: Vec<MetricsReport>, failures: Vec<FoldFailure>) -> Self {
        let summary = metrics::summarize(&folds);
        Self {
            folds,
            failures,
            summary,
        }
    }
}

/// Trains one model per fold and reports the final weights of each on its
/// held-out fold. A failing fold is recorded and the others still run.
pub fn crossval(
    cfg: &RunConfig,
    data: &Dataset,
    folds: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CrossvalReport> {
    let splits = kfold_split(&data.diseases(), folds, seed)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (k, fold) in splits.iter().enumerate() {
        let run = || -> Result<MetricsReport> {
            let tr = data.subset(&fold.train);
            let va = data.subset(&fold.val);
            let io = TrainIo {
                out_dir: out_dir.map(|d| d.join(format!("fold{k}"))),
                resume: None,
            };
            let outcome = train(cfg, &tr, Some(&va), seed, &io)?;
            let mut r = evaluate(&outcome.weights, &va, cfg.train.thresholds)?;
            r.fold = Some(k);
            Ok(r)
        };
        match run() {
            Ok(r) => {
                log::info!("fold {k}: disease F1 {:.1}", r.disease.f1);
                reports.push(r);
            }
            Err(e) => {
                log::error!("fold {k} failed: {e}");
                failures.push(FoldFailure {
                    fold: k,
                    error: e.to_string(),
                });
            }
        }
    }
    let report = CrossvalReport::from_folds(reports, failures);
    if let Some(out) = out_dir {
        let p = out.join("crossval.json");
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn tiny() -> (RunConfig, Dataset) {
        let model = ModelConfig {
            image_height: 32,
            image_width: 32,
            embed_dim: 16,
            fusion_dim: 16,
            backbone_layers: 1,
            head_layers: 1,
            num_heads: 2,
            select_k: 3,
            ..ModelConfig::desk()
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let samples = synth::generate(&SynthConfig {
            num_images: 8,
            height: 32,
            width: 32,
            ..Default::default()
        })
        .unwrap();
        (RunConfig { model, train }, synth::to_dataset(&samples))
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (mut cfg, data) = tiny();
        cfg.train.epochs = 0;
        let out = train(&cfg, &data, None, 5, &TrainIo::default()).unwrap();
        assert_eq!(out.weights, ModelWeights::init(&cfg.model, 5).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn batch_gradient_is_thread_count_independent() {
        let (cfg, data) = tiny();
        let w = ModelWeights::<f32>::init(&cfg.model, 0).unwrap();
        let batch = Batch::from_indices(&data, &[0, 1, 2, 3], 3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let two = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let a = one.install(|| batch_gradients(&w, &batch)).unwrap();
        let b = two.install(|| batch_gradients(&w, &batch)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let full = train(&cfg, &data, None, 3, &TrainIo::default()).unwrap();

        let mut first = cfg.clone();
        first.train.epochs = 1;
        let io = TrainIo {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        train(&first, &data, None, 3, &io).unwrap();
        let resumed = train(
            &cfg,
            &data,
            None,
            3,
            &TrainIo {
                out_dir: None,
                resume: Some(checkpoint::last_dir(dir.path())),
            },
        )
        .unwrap();
        assert_eq!(resumed.weights, full.weights);
        assert_eq!(resumed.optimizer, full.optimizer);
    }

    #[test]
    fn log_and_checkpoints_written() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let io = TrainIo {
            out_dir: Some(dir.path().to_path_buf()),
            resume: None,
        };
        let out = train(&cfg, &data, Some(&data), 1, &io).unwrap();
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let first: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert!(first.val.is_some());
        assert!(checkpoint::load(&checkpoint::best_dir(dir.path())).is_ok());
        assert_eq!(
            checkpoint::load(&checkpoint::last_dir(dir.path())).unwrap(),
            out.weights
        );
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
