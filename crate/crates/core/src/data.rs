//! Manifest ingestion, image loading, stratified folds, batching and CutMix.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{LabelSet, SoftTargets};

/// What an RNG substream is used for. Each purpose gets its own ChaCha
/// stream so changing one consumer never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Folds = 4,
    Synth = 5,
}

/// Seeded generator for `(purpose, a, b)`, e.g. `(Augment, epoch, batch)`.
pub fn stream_rng(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ (a << 28) ^ b);
    rng
}

/// Class names per task, indexed by id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    pub disease: Vec<String>,
    pub body_part: Vec<String>,
    pub attribute: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    disease: BTreeMap<String, String>,
    body_part: BTreeMap<String, String>,
    attribute: BTreeMap<String, String>,
}

fn names_from_map(path: &Path, task: &str, map: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let mut out = vec![None; map.len()];
    for (k, v) in map {
        let id: usize = k.parse().map_err(|_| Error::Validation {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{task}: id {k:?} is not a non-negative integer"),
        })?;
        if id >= out.len() {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{task}: ids must be 0..{}, found {id}", out.len()),
            });
        }
        out[id] = Some(v.clone());
    }
    Ok(out.into_iter().map(|v| v.expect("dense ids")).collect())
}

impl Vocabulary {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.disease.len(), self.body_part.len(), self.attribute.len())
    }

    /// Placeholder names `disease_0`, ... for unnamed classes.
    pub fn numbered(n_d: usize, n_b: usize, n_a: usize) -> Self {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}_{i}")).collect();
        Self {
            disease: names("disease", n_d),
            body_part: names("body_part", n_b),
            attribute: names("attribute", n_a),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self {
            disease: names_from_map(path, "disease", &raw.disease)?,
            body_part: names_from_map(path, "body_part", &raw.body_part)?,
            attribute: names_from_map(path, "attribute", &raw.attribute)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = |v: &[String]| v.iter().enumerate().map(|(i, n)| (i.to_string(), n.clone())).collect();
        let raw = VocabFile {
            disease: map(&self.disease),
            body_part: map(&self.body_part),
            attribute: map(&self.attribute),
        };
        fs::write(path, serde_json::to_string_pretty(&raw)?).map_err(|e| Error::io(path, e))
    }

    /// Errors unless the class counts agree with `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = (cfg.num_diseases, cfg.num_body_parts, cfg.num_attributes);
        if self.sizes() != want {
            return Err(Error::Config(format!(
                "vocabulary sizes {:?} do not match model classes {want:?}",
                self.sizes()
            )));
        }
        Ok(())
    }
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub disease_id: usize,
    pub body_part_ids: Vec<usize>,
    pub attribute_ids: Vec<usize>,
}

impl ManifestRecord {
    pub fn labels(&self, vocab: &Vocabulary) -> LabelSet {
        LabelSet::from_ids(
            self.disease_id,
            &self.body_part_ids,
            &self.attribute_ids,
            vocab.body_part.len(),
            vocab.attribute.len(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub vocab: Vocabulary,
    /// Relative image paths resolve against this directory.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        let p = Path::new(&rec.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn diseases(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.disease_id).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            vocab: self.vocab.clone(),
            root: self.root.clone(),
        }
    }

    /// Writes the records as JSONL.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Malformed,
    UnknownId,
    DuplicatePath,
    EmptyBodyParts,
    EmptyAttributes,
    UnreadableImage,
}

impl IssueKind {
    /// Problems that make the manifest unusable.
    pub fn is_error(self) -> bool {
        !matches!(self, IssueKind::EmptyBodyParts | IssueKind::EmptyAttributes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    /// 1-based manifest line.
    pub line: usize,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.kind.is_error())
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| !i.kind.is_error())
    }

    pub fn is_ok(&self) -> bool {
        self.errors().next().is_none()
    }
}

fn check_ids(ids: &[usize], n: usize, what: &str) -> Option<String> {
    ids.iter()
        .find(|&&i| i >= n)
        .map(|i| format!("{what} id {i} outside vocabulary of {n}"))
}

/// Reads every line and collects all problems instead of stopping at the
/// first. Image files are only decoded when `decode_images` is set.
pub fn scan_manifest(
    path: &Path,
    vocab: &Vocabulary,
    decode_images: bool,
) -> Result<(DatasetManifest, ValidationReport)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut issue = |kind, message| {
            report.issues.push(Issue {
                line: line_no,
                kind,
                message,
            })
        };
        let rec: ManifestRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issue(IssueKind::Malformed, e.to_string());
                continue;
            }
        };
        let (n_d, n_b, n_a) = vocab.sizes();
        if let Some(m) = check_ids(&[rec.disease_id], n_d, "disease")
            .or_else(|| check_ids(&rec.body_part_ids, n_b, "body_part"))
            .or_else(|| check_ids(&rec.attribute_ids, n_a, "attribute"))
        {
            issue(IssueKind::UnknownId, m);
            continue;
        }
        if !seen.insert(rec.image_path.clone()) {
            issue(
                IssueKind::DuplicatePath,
                format!("duplicate image_path {}", rec.image_path),
            );
            continue;
        }
        if rec.body_part_ids.is_empty() {
            issue(IssueKind::EmptyBodyParts, "no body part labels".into());
        }
        if rec.attribute_ids.is_empty() {
            issue(IssueKind::EmptyAttributes, "no attribute labels".into());
        }
        records.push(rec);
        lines_of.push(line_no);
    }
    let manifest = DatasetManifest {
        records,
        vocab: vocab.clone(),
        root,
    };
    if decode_images {
        let failures: Vec<(usize, String)> = manifest
            .records
            .par_iter()
            .zip(lines_of.par_iter())
            .filter_map(|(r, &line)| {
                image::open(manifest.resolve(r))
                    .err()
                    .map(|e| (line, format!("{}: {e}", r.image_path)))
            })
            .collect();
        for (line, message) in failures {
            report.issues.push(Issue {
                line,
                kind: IssueKind::UnreadableImage,
                message,
            });
        }
        report.issues.sort_by_key(|i| i.line);
    } else {
        for (r, &line) in manifest.records.iter().zip(&lines_of) {
            if !manifest.resolve(r).is_file() {
                report.issues.push(Issue {
                    line,
                    kind: IssueKind::UnreadableImage,
                    message: format!("{} does not exist", r.image_path),
                });
            }
        }
        report.issues.sort_by_key(|i| i.line);
    }
    report.records = manifest.records.len();
    Ok((manifest, report))
}

/// Loads and validates a JSONL manifest; the first hard problem becomes
/// an error naming its line. Warnings are logged and returned.
pub fn load_manifest(path: &Path, vocab: &Vocabulary) -> Result<(DatasetManifest, ValidationReport)> {
    let (manifest, report) = scan_manifest(path, vocab, false)?;
    let structural = report.errors().find(|i| i.kind != IssueKind::UnreadableImage);
    if let Some(first) = structural.or_else(|| report.errors().next()) {
        let path = path.to_path_buf();
        let (line, message) = (first.line, first.message.clone());
        return Err(match first.kind {
            IssueKind::Malformed => Error::Parse { path, line, message },
            _ => Error::Validation { path, line, message },
        });
    }
    if manifest.is_empty() {
        log::warn!("{} contains no records", path.display());
    }
    for w in report.warnings() {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    Ok((manifest, report))
}

/// Decodes an image, scales it (bilinear) so it covers `height x width`,
/// center-crops and maps to `[0, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(ImageTensor::from_rgb8(&fit_center_crop(&img, height, width)))
}

pub fn fit_center_crop(img: &image::RgbImage, height: usize, width: usize) -> image::RgbImage {
    let (w0, h0) = (img.width() as f64, img.height() as f64);
    let scale = (width as f64 / w0).max(height as f64 / h0);
    let nw = ((w0 * scale).round() as u32).max(width as u32);
    let nh = ((h0 * scale).round() as u32).max(height as u32);
    let resized = if (nw, nh) == (img.width(), img.height()) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let x = (nw - width as u32) / 2;
    let y = (nh - height as u32) / 2;
    imageops::crop_imm(&resized, x, y, width as u32, height as u32).to_image()
}

/// Decoded images with their labels, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelSet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Decodes every image (in parallel; order follows the manifest).
    pub fn load(manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<Self> {
        let images = manifest
            .records
            .par_iter()
            .map(|r| load_image(&manifest.resolve(r), cfg.image_height, cfg.image_width))
            .collect::<Result<Vec<_>>>()?;
        let labels = manifest.records.iter().map(|r| r.labels(&manifest.vocab)).collect();
        Ok(Self { images, labels })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    pub fn diseases(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.disease).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified k-fold split on disease labels. Each class is shuffled and
/// dealt round-robin into the folds, continuing where the previous class
/// stopped so fold sizes stay balanced.
pub fn kfold_split(diseases: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if diseases.len() < folds {
        return Err(Error::Config(format!(
            "{} samples cannot fill {folds} folds",
            diseases.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in diseases.iter().enumerate() {
        by_class.entry(d).or_default().push(i);
    }
    let mut rng = stream_rng(seed, Stream::Folds, 0, 0);
    let mut assignment = vec![0usize; diseases.len()];
    let mut next = 0usize;
    for (class, mut members) in by_class {
        if members.len() < folds {
            log::warn!(
                "disease class {class} has {} samples for {folds} folds; stratification is best-effort",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok((0..folds)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..diseases.len()).partition(|&i| assignment[i] == f);
            Fold { train, val }
        })
        .collect())
}

/// A mini-batch with possibly mixed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelSet>,
    pub targets: Vec<SoftTargets>,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
    /// The `(epoch, batch)` substream that drove augmentation.
    pub rng_token: (u64, u64),
    pub mix: Option<CutMixRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_indices(data: &Dataset, indices: &[usize], num_diseases: usize) -> Self {
        let labels: Vec<LabelSet> = indices.iter().map(|&i| data.labels[i].clone()).collect();
        Self {
            images: indices.iter().map(|&i| data.images[i].clone()).collect(),
            targets: labels.iter().map(|l| l.to_targets(num_diseases)).collect(),
            labels,
            indices: indices.to_vec(),
            rng_token: (0, 0),
            mix: None,
        }
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Box of side ratios `sqrt(1 - lambda)` centred on `(cy, cx)`,
    /// clipped to the image.
    pub fn around(height: usize, width: usize, lambda: f64, cy: usize, cx: usize) -> Self {
        let ratio = (1.0 - lambda).max(0.0).sqrt();
        let ch = (height as f64 * ratio) as usize;
        let cw = (width as f64 * ratio) as usize;
        Self {
            y0: cy.saturating_sub(ch / 2).min(height),
            y1: (cy + ch.div_ceil(2)).min(height),
            x0: cx.saturating_sub(cw / 2).min(width),
            x1: (cx + cw.div_ceil(2)).min(width),
        }
    }

    /// Label weight of the original sample: `1 - area / (H W)`.
    pub fn keep_fraction(&self, height: usize, width: usize) -> f64 {
        1.0 - self.area() as f64 / (height * width) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMixRecord {
    /// The Beta draw before clipping.
    pub lambda: f64,
    /// Weight actually used for the labels.
    pub lambda_prime: f64,
    pub cut: CutBox,
    /// `partner[i]` is the sample pasted into sample `i`.
    pub partner: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutMixParams {
    pub prob: f64,
    pub alpha: f64,
}

impl Default for CutMixParams {
    fn default() -> Self {
        Self { prob: 0.5, alpha: 0.3 }
    }
}

fn mix(a: &[f32], b: &[f32], lam: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| lam * x + (1.0 - lam) * y).collect()
}

/// Pastes `cut` from each sample's partner and mixes all targets with the
/// clipped-area weight.
pub fn apply_cutmix(batch: &Batch, cut: CutBox, partner: &[usize], lambda: f64) -> Batch {
    let (h, w) = (batch.images[0].height(), batch.images[0].width());
    let lp = cut.keep_fraction(h, w);
    let lam = lp as f32;
    let mut out = batch.clone();
    for (i, &p) in partner.iter().enumerate() {
        if p == i {
            continue;
        }
        let src = &batch.images[p];
        let dst = &mut out.images[i];
        for y in cut.y0..cut.y1 {
            for x in cut.x0..cut.x1 {
                dst.set_pixel(y, x, src.pixel(y, x));
            }
        }
        let (a, b) = (&batch.targets[i], &batch.targets[p]);
        out.targets[i] = SoftTargets {
            disease: mix(&a.disease, &b.disease, lam),
            body_parts: mix(&a.body_parts, &b.body_parts, lam),
            attributes: mix(&a.attributes, &b.attributes, lam),
        };
    }
    out.mix = Some(CutMixRecord {
        lambda,
        lambda_prime: lp,
        cut,
        partner: partner.to_vec(),
    });
    out
}

/// With probability `prob`, CutMix the whole batch against a random
/// permutation of itself. Batches of one sample pass through.
pub fn cutmix<R: Rng>(batch: &Batch, params: CutMixParams, rng: &mut R) -> Batch {
    if batch.len() < 2 || !rng.random_bool(params.prob.clamp(0.0, 1.0)) {
        return batch.clone();
    }
    let lambda = Beta::new(params.alpha, params.alpha)
        .expect("positive alpha")
        .sample(rng);
    let (h, w) = (batch.images[0].height(), batch.images[0].width());
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    apply_cutmix(batch, CutBox::around(h, w, lambda, cy, cx), &partner, lambda)
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(y, w - 1 - x));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    /// `None` disables CutMix.
    pub cutmix: Option<CutMixParams>,
    pub hflip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            cutmix: Some(CutMixParams::default()),
            hflip: false,
        }
    }
}

/// Batch order for one epoch: a seeded shuffle cut into chunks.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch, 0));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Builds and augments batch `index` of `epoch`. The result depends only
/// on the arguments, never on which thread builds it.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    num_diseases: usize,
    aug: &Augment,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Batch {
    let mut rng = stream_rng(seed, Stream::Augment, epoch, index);
    let mut batch = Batch::from_indices(data, indices, num_diseases);
    batch.rng_token = (epoch, index);
    if aug.hflip {
        for img in batch.images.iter_mut() {
            if rng.random_bool(0.5) {
                *img = hflip(img);
            }
        }
    }
    if let Some(p) = aug.cutmix {
        batch = cutmix(&batch, p, &mut rng);
    }
    batch
}

/// Every batch of one epoch, built in parallel.
pub fn epoch_batches(
    data: &Dataset,
    batch_size: usize,
    num_diseases: usize,
    aug: &Augment,
    seed: u64,
    epoch: u64,
) -> Vec<Batch> {
    epoch_order(data.len(), batch_size, seed, epoch)
        .par_iter()
        .enumerate()
        .map(|(b, idx)| make_batch(data, idx, num_diseases, aug, seed, epoch, b as u64))
        .collect()
}
