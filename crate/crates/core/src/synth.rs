//! Programmatic skin-lesion images with known labels and lesion boxes.
//!
//! A bright square lesion sits on noisy skin. Background tone encodes the
//! body part, lesion colour encodes the disease, and attributes describe visible lesion properties. Lesions are
//! aligned to the patch grid so "inside the lesion" is exact at token
//! level.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::data::{stream_rng, Dataset, DatasetManifest, ManifestRecord, Stream, Vocabulary};
use crate::error::{Error, Result};
use crate::model::LabelSet;

pub const DISEASES: [&str; 3] = ["erythema", "xanthoma", "cyanotic_macule"];
pub const BODY_PARTS: [&str; 4] = ["face", "trunk", "arm", "leg"];
pub const ATTRIBUTES: [&str; 5] = ["red", "yellow", "scaly", "large", "ringed"];

const SKIN: [[f32; 3]; 4] = [
    [0.56, 0.48, 0.42],
    [0.48, 0.37, 0.30],
    [0.40, 0.30, 0.24],
    [0.31, 0.23, 0.18],
];

const LESION: [[f32; 3]; 3] = [[1.0, 0.35, 0.35], [0.95, 0.85, 0.30], [0.35, 0.85, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Std of per-pixel Gaussian noise.
    pub noise: f32,
    /// Std of the per-image shift applied to the lesion colour.
    pub color_jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 60,
            height: 64,
            width: 64,
            patch_size: 8,
            seed: 0,
            noise: 0.15,
            color_jitter: 0.05,
        }
    }
}

/// Lesion location in patch-grid units, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionBox {
    pub row0: usize,
    pub col0: usize,
    pub side: usize,
}

impl LesionBox {
    /// Whether 1-based patch token `index` lies inside the lesion on a
    /// grid with `cols` columns.
    pub fn contains_token(&self, index: usize, cols: usize) -> bool {
        let (r, c) = ((index - 1) / cols, (index - 1) % cols);
        (self.row0..self.row0 + self.side).contains(&r) && (self.col0..self.col0 + self.side).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: ImageTensor,
    pub labels: LabelSet,
    pub lesion: LesionBox,
}

pub fn vocabulary() -> Vocabulary {
    let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
    Vocabulary {
        disease: v(&DISEASES),
        body_part: v(&BODY_PARTS),
        attribute: v(&ATTRIBUTES),
    }
}

fn render<R: Rng>(cfg: &SynthConfig, index: usize, rng: &mut R) -> SynthSample {
    let p = cfg.patch_size;
    let (rows, cols) = (cfg.height / p, cfg.width / p);
    let disease = index % DISEASES.len();
    let body = rng.random_range(0..BODY_PARTS.len());
    let side = if rng.random_bool(0.5) { 4 } else { 3 }.min(rows).min(cols);
    let row0 = rng.random_range(0..=rows - side);
    let col0 = rng.random_range(0..=cols - side);
    let scaly = disease == 2 || rng.random_bool(0.2);
    let ringed = rng.random_bool(0.5);

    let noise = Normal::new(0.0f32, cfg.noise.max(1e-9)).unwrap();
    let jitter = Normal::new(0.0f32, cfg.color_jitter.max(1e-9)).unwrap();
    let shift: [f32; 3] = std::array::from_fn(|_| jitter.sample(rng));
    let skin = SKIN[body];
    let lesion = LESION[disease];

    let (y0, x0, s) = (row0 * p, col0 * p, side * p);
    let mut image = ImageTensor::zeros(cfg.height, cfg.width);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let inside = (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x);
            let mut rgb = if inside {
                let edge = (y - y0).min(y0 + s - 1 - y).min((x - x0).min(x0 + s - 1 - x));
                let mut c: [f32; 3] = std::array::from_fn(|k| lesion[k] + shift[k]);
                if ringed && edge < 2 {
                    c = c.map(|v| v * 0.55);
                }
                if scaly && (x + 2 * y) % 5 == 0 {
                    c = c.map(|v| v * 0.5 + 0.45);
                }
                c
            } else {
                skin
            };
            for v in rgb.iter_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
            image.set_pixel(y, x, rgb);
        }
    }

    let mut attrs = Vec::new();
    match disease {
        0 => attrs.push(0),
        1 => attrs.push(1),
        _ => {}
    }
    if scaly {
        attrs.push(2);
    }
    if side == 4 {
        attrs.push(3);
    }
    if ringed {
        attrs.push(4);
    }
    SynthSample {
        image,
        labels: LabelSet::from_ids(disease, &[body], &attrs, BODY_PARTS.len(), ATTRIBUTES.len()),
        lesion: LesionBox { row0, col0, side },
    }
}

/// Generates `cfg.num_images` samples with classes cycled so the disease
/// distribution is balanced.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let p = cfg.patch_size;
    if p == 0
        || !cfg.height.is_multiple_of(p)
        || !cfg.width.is_multiple_of(p)
        || cfg.height / p < 3
        || cfg.width / p < 3
    {
        return Err(Error::Config(format!(
            "synthetic images need at least a 3x3 grid of {p}-pixel patches, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    Ok((0..cfg.num_images)
        .map(|i| render(cfg, i, &mut stream_rng(cfg.seed, Stream::Synth, i as u64, 0)))
        .collect())
}

pub fn to_dataset(samples: &[SynthSample]) -> Dataset {
    Dataset {
        images: samples.iter().map(|s| s.image.clone()).collect(),
        labels: samples.iter().map(|s| s.labels.clone()).collect(),
    }
}

/// Writes PNGs, `manifest.jsonl` and `vocab.json` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let vocab = vocabulary();
    let mut records = Vec::with_capacity(samples.len());
    let mut boxes = String::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:04}.png");
        let path = dir.join(&rel);
        s.image
            .to_rgb8()
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
        let ids = |v: &[u8]| v.iter().enumerate().filter(|(_, &b)| b == 1).map(|(j, _)| j).collect();
        records.push(ManifestRecord {
            image_path: rel,
            disease_id: s.labels.disease,
            body_part_ids: ids(&s.labels.body_parts),
            attribute_ids: ids(&s.labels.attributes),
        });
        boxes.push_str(&serde_json::to_string(&s.lesion)?);
        boxes.push('\n');
    }
    let manifest = DatasetManifest {
        records,
        vocab: vocab.clone(),
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.jsonl"))?;
    vocab.save(&dir.join("vocab.json"))?;
    let lesions = dir.join("lesions.jsonl");
    fs::write(&lesions, boxes).map_err(|e| Error::io(lesions, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_rendering() {
        let s = generate(&SynthConfig::default()).unwrap();
        assert_eq!(s.len(), 60);
        for (i, x) in s.iter().enumerate() {
            assert_eq!(x.labels.disease, i % 3);
            assert_eq!(x.labels.body_parts.iter().map(|&v| v as usize).sum::<usize>(), 1);
            assert_eq!(x.labels.attributes[3] == 1, x.lesion.side == 4);
            if x.labels.disease == 2 {
                assert_eq!(x.labels.attributes[2], 1);
            }
        }
        assert_eq!(s, generate(&SynthConfig::default()).unwrap());
    }

    #[test]
    fn token_membership() {
        let b = LesionBox {
            row0: 1,
            col0: 2,
            side: 3,
        };
        // 8 columns: token 11 is row 1, col 2
        assert!(b.contains_token(11, 8));
        assert!(!b.contains_token(10, 8));
        assert!(b.contains_token(8 * 3 + 5, 8));
        assert!(!b.contains_token(8 * 4 + 3, 8));
    }

    #[test]
    fn roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_images: 4,
            ..Default::default()
        };
        let samples = generate(&cfg).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let vocab = Vocabulary::load(&dir.path().join("vocab.json")).unwrap();
        let (m, _) = crate::data::load_manifest(&dir.path().join("manifest.jsonl"), &vocab).unwrap();
        let loaded = Dataset::load(&m, &crate::ModelConfig::desk()).unwrap();
        assert_eq!(loaded.labels, to_dataset(&samples).labels);
        // 8-bit quantization only
        for (a, b) in loaded.images.iter().zip(&samples) {
            let err = a
                .data()
                .iter()
                .zip(b.image.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }
}
