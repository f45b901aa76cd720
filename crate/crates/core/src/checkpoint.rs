//! Checkpoint directories: `meta.json` plus one little-endian `f32` file per
//! tensor. Training checkpoints add `optimizer/` (momentum buffers in the
//! same format) and `state.json`.
//!
//! ```text
//! ckpt/
//!   meta.json            {"format", "version", "config", "tensors": [{name, shape, dtype, file}]}
//!   tensors/<name>.bin   rows * cols * 4 bytes, row-major
//!   optimizer/meta.json  same layout, momentum buffers
//!   state.json           training progress
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::optim::{OptimizerState, SgdConfig};
use crate::params::Parameters;

pub const FORMAT: &str = "dermvit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Training progress stored next to the weights for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub epochs_done: usize,
    pub step_count: u64,
    pub sgd: SgdConfig,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn tensor_bytes(t: &Array2<f32>) -> Vec<u8> {
    t.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_tensors(dir: &Path, config: &ModelConfig, tensors: &[(String, &Array2<f32>)]) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("tensors/{name}.bin");
        write_file(&dir.join(&file), &tensor_bytes(t))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            dtype: "f32le".into(),
            file,
        });
    }
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        tensors: entries,
    };
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let bytes = read_file(&dir.join("meta.json"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            dir.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Array2<f32>> {
    if entry.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported dtype {}",
            entry.name, entry.dtype
        )));
    }
    let bytes = read_file(&dir.join(&entry.file))?;
    let [r, c] = entry.shape;
    if bytes.len() != r * c * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes for shape {r}x{c}",
            entry.name,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Array2::from_shape_vec((r, c), data).expect("length checked"))
}

/// Fills `targets` (visit order) from the table, checking names and shapes.
fn fill(
    dir: &Path,
    meta: &CheckpointMeta,
    mut visit: impl FnMut(&mut dyn FnMut(String, &mut Array2<f32>)),
) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(entry) = meta.tensors.get(i) else {
            err = Some(Error::Checkpoint(format!("checkpoint lacks tensor {name}")));
            return;
        };
        i += 1;
        if entry.name != name || entry.shape != [t.nrows(), t.ncols()] {
            err = Some(Error::Checkpoint(format!(
                "expected {name} {:?}, found {} {:?}",
                t.dim(),
                entry.name,
                entry.shape
            )));
            return;
        }
        match read_tensor(dir, entry) {
            Ok(v) => *t = v,
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != meta.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {i}",
            meta.tensors.len()
        )));
    }
    Ok(())
}

/// Writes the weights; an existing directory is replaced.
pub fn save(dir: &Path, w: &ModelWeights<f32>) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensors(dir, &w.config, &w.named_tensors())
}

pub fn load(dir: &Path) -> Result<ModelWeights<f32>> {
    let meta = read_meta(dir)?;
    let mut w = ModelWeights::zeros(&meta.config)?;
    fill(dir, &meta, |f| w.visit_mut("", f))?;
    Ok(w)
}

/// Weights plus optimizer and progress, for resuming.
pub fn save_training(dir: &Path, w: &ModelWeights<f32>, opt: &OptimizerState<f32>, state: &TrainState) -> Result<()> {
    save(dir, w)?;
    let names: Vec<(String, &Array2<f32>)> = w
        .named_tensors()
        .into_iter()
        .zip(&opt.velocity)
        .map(|((n, _), v)| (n, v))
        .collect();
    write_tensors(&dir.join("optimizer"), &w.config, &names)?;
    write_file(&dir.join("state.json"), serde_json::to_string_pretty(state)?.as_bytes())
}

pub fn load_training(dir: &Path) -> Result<(ModelWeights<f32>, OptimizerState<f32>, TrainState)> {
    let w = load(dir)?;
    let state: TrainState = serde_json::from_slice(&read_file(&dir.join("state.json"))?)?;
    let mut opt = OptimizerState::new(&w, state.sgd)?;
    opt.step_count = state.step_count;
    let odir = dir.join("optimizer");
    let meta = read_meta(&odir)?;
    let mut velocity = std::mem::take(&mut opt.velocity);
    fill(&odir, &meta, |f| {
        let names = w.named_tensors();
        for ((n, _), v) in names.into_iter().zip(velocity.iter_mut()) {
            f(n, v);
        }
    })?;
    opt.velocity = velocity;
    Ok((w, opt, state))
}

/// SHA-256 over the names, shapes and bytes of every tensor, in order.
pub fn weights_hash(w: &ModelWeights<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in w.named_tensors() {
        h.update(name.as_bytes());
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        h.update(tensor_bytes(t));
    }
    hex::encode(h.finalize())
}

/// SHA-256 of `meta.json` followed by every tensor file in table order.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let meta_bytes = read_file(&dir.join("meta.json"))?;
    let meta = read_meta(dir)?;
    let mut h = Sha256::new();
    h.update(&meta_bytes);
    for e in &meta.tensors {
        h.update(read_file(&dir.join(&e.file))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn best_dir(out: &Path) -> PathBuf {
    out.join("best")
}

pub fn last_dir(out: &Path) -> PathBuf {
    out.join("last")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::<f32>::init(&ModelConfig::desk(), 4).unwrap();
        save(dir.path(), &w).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(w, back);
        assert_eq!(weights_hash(&w), weights_hash(&back));
        let meta = read_meta(dir.path()).unwrap();
        assert_eq!(meta.tensors[0].name, "backbone.patch_embed.weight");
        assert_eq!(meta.tensors[0].shape, [192, 64]);
    }

    #[test]
    fn hash_depends_on_values() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        let w = ModelWeights::<f32>::init(&cfg, 1).unwrap();
        save(d1.path(), &w).unwrap();
        save(d2.path(), &w).unwrap();
        assert_eq!(checkpoint_hash(d1.path()).unwrap(), checkpoint_hash(d2.path()).unwrap());
        let mut w2 = w.clone();
        w2.classifiers.disease_aux.bias[[0, 0]] += 1e-3;
        save(d2.path(), &w2).unwrap();
        assert_ne!(checkpoint_hash(d1.path()).unwrap(), checkpoint_hash(d2.path()).unwrap());
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::<f32>::init(&ModelConfig::desk(), 0).unwrap();
        save(dir.path(), &w).unwrap();
        let f = dir.path().join("tensors/backbone.cls_token.bin");
        fs::write(&f, [0u8; 3]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn training_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let w = ModelWeights::<f32>::init(&ModelConfig::desk(), 0).unwrap();
        let mut opt = OptimizerState::new(&w, SgdConfig::default()).unwrap();
        opt.velocity[3][[0, 1]] = 0.25;
        opt.step_count = 7;
        let st = TrainState {
            seed: 9,
            epochs_done: 2,
            step_count: 7,
            sgd: SgdConfig::default(),
            best_f1: Some(50.0),
            best_epoch: Some(1),
        };
        save_training(dir.path(), &w, &opt, &st).unwrap();
        let (w2, opt2, st2) = load_training(dir.path()).unwrap();
        assert_eq!(w, w2);
        assert_eq!(opt, opt2);
        assert_eq!(st, st2);
    }
}
