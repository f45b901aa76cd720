//! Central finite-difference verification of the analytic gradients.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::data::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::model::{self, ModelWeights, SoftTargets};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub probes_per_tensor: usize,
    /// Lower bound on the relative-error denominator, so gradients that
    /// are zero on both sides count as agreeing.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            probes_per_tensor: 20,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub tensors: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_error)
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn total(w: &ModelWeights<f64>, images: &[ImageTensor], targets: &[SoftTargets]) -> Result<f64> {
    Ok(model::batch_loss(w, images, targets)?.total)
}

fn set(w: &mut ModelWeights<f64>, tensor: usize, row: usize, col: usize, value: f64) {
    let mut i = 0;
    w.visit_mut("", &mut |_, t| {
        if i == tensor {
            t[[row, col]] = value;
        }
        i += 1;
    });
}

/// Compares analytic gradients of the mean joint loss with central
/// differences on up to `probes_per_tensor` random entries of every
/// tensor.
pub fn check(
    weights: &ModelWeights<f64>,
    images: &[ImageTensor],
    targets: &[SoftTargets],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::Config("gradient check needs matching images and targets".into()));
    }
    let scale = 1.0 / images.len() as f64;
    let mut analytic: Option<Vec<ndarray::Array2<f64>>> = None;
    for (img, t) in images.iter().zip(targets) {
        let (_, g) = model::sample_gradients(weights, img, t, scale)?;
        match &mut analytic {
            None => analytic = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let analytic = analytic.expect("non-empty batch");

    let originals = weights.named_tensors();
    let mut w = weights.clone();
    let mut rng = stream_rng(cfg.seed, Stream::Init, u64::MAX, 0);
    let mut probes = Vec::new();
    let h = cfg.step;
    for (ti, (name, orig)) in originals.iter().enumerate() {
        let (n, cols) = (orig.len(), orig.ncols());
        let picks = index::sample(&mut rng, n, cfg.probes_per_tensor.min(n));
        let mut picks: Vec<usize> = picks.into_iter().collect();
        picks.sort_unstable();
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let p0 = orig[[r, c]];
            set(&mut w, ti, r, c, p0 + h);
            let plus = total(&w, images, targets)?;
            set(&mut w, ti, r, c, p0 - h);
            let minus = total(&w, images, targets)?;
            set(&mut w, ti, r, c, p0);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][[r, c]];
            probes.push(Probe {
                tensor: name.clone(),
                row: r,
                col: c,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, cfg.floor),
            });
        }
    }
    Ok(GradCheckReport {
        probes,
        tensors: originals.len(),
    })
}
