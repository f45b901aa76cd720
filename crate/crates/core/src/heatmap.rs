//! Attention heatmaps: mutual class/patch scores drawn over the input.

use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::lesion;
use crate::model::{self, ModelWeights};

pub const DEFAULT_ALPHA: f32 = 0.5;

/// Blue, cyan, yellow, red ramp for `t` in `[0, 1]`.
pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.6], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.9, 0.0, 0.0]];
    let x = t * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f32;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

/// Scores reshaped to `rows x cols`, min-max normalized and upsampled
/// (bilinear) to the image size.
pub fn score_map(scores: &[f32], rows: usize, cols: usize, height: usize, width: usize) -> Result<Vec<f32>> {
    if scores.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} scores for a {rows}x{cols} grid",
            scores.len()
        )));
    }
    let lo = scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let norm: Vec<f32> = scores
        .iter()
        .map(|&s| if span > 0.0 { (s - lo) / span } else { 0.0 })
        .collect();
    let grid: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(cols as u32, rows as u32, norm).expect("sized from grid");
    Ok(imageops::resize(&grid, width as u32, height as u32, FilterType::Triangle).into_raw())
}

/// Colour-mapped score overlay alpha-blended on `image`.
pub fn overlay(image: &ImageTensor, scores: &[f32], rows: usize, cols: usize, alpha: f32) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    let map = score_map(scores, rows, cols, h, w)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base = image.pixel(y, x);
        let heat = colormap(map[y * w + x]);
        Rgb(std::array::from_fn(|c| {
            let v = (1.0 - alpha) * base[c] + alpha * heat[c];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    }))
}

/// Mutual scores for one layer on the disease path (backbone layers, then
/// the disease head's layers).
pub fn layer_scores(w: &ModelWeights<f32>, image: &ImageTensor, layer: usize) -> Result<Vec<f32>> {
    let pred = model::forward(image, w)?;
    let path = pred.attention.disease_path();
    let record = path.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} out of range; the disease path has {} layers",
            path.len()
        ))
    })?;
    lesion::mutual_scores(record)
}

/// Writes the heatmap PNG and, if asked, the score grid as CSV. Returns
/// the scores.
pub fn export_attention(
    w: &ModelWeights<f32>,
    image: &ImageTensor,
    layer: usize,
    out_png: &Path,
    out_csv: Option<&Path>,
) -> Result<Vec<f32>> {
    let scores = layer_scores(w, image, layer)?;
    let (rows, cols) = w.config.grid();
    overlay(image, &scores, rows, cols, DEFAULT_ALPHA)?
        .save(out_png)
        .map_err(|source| Error::Image {
            path: out_png.to_path_buf(),
            source,
        })?;
    if let Some(csv) = out_csv {
        let text: String = scores
            .chunks(cols)
            .map(|r| r.iter().map(|s| format!("{s:e}")).collect::<Vec<_>>().join(",") + "\n")
            .collect();
        fs::write(csv, text).map_err(|e| Error::io(csv, e))?;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ModelConfig;

    #[test]
    fn uniform_scores_give_uniform_overlay() {
        let img = ImageTensor::new(16, 16, vec![0.4; 16 * 16 * 3]).unwrap();
        let out = overlay(&img, &[0.25; 4], 2, 2, 0.5).unwrap();
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
    }

    #[test]
    fn desk_grid_is_eight_by_eight() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.grid(), (8, 8));
        let scores: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let map = score_map(&scores, 8, 8, 64, 64).unwrap();
        assert_eq!(map.len(), 64 * 64);
        // the last grid cell is the hottest region
        assert!(map[64 * 64 - 1] > map[0]);
        assert!(score_map(&scores, 4, 4, 64, 64).is_err());
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.6]);
        assert_eq!(colormap(1.0), [0.9, 0.0, 0.0]);
    }

    #[test]
    fn bad_layer_is_rejected() {
        let cfg = ModelConfig::desk();
        let w = ModelWeights::<f32>::init(&cfg, 0).unwrap();
        let img = ImageTensor::zeros(64, 64);
        let n = cfg.backbone_layers + cfg.head_layers;
        assert_eq!(layer_scores(&w, &img, n - 1).unwrap().len(), 64);
        assert!(matches!(layer_scores(&w, &img, n), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("a.png");
        let csv = dir.path().join("a.csv");
        export_attention(&w, &img, 0, &png, Some(&csv)).unwrap();
        assert_eq!(image::open(&png).unwrap().width(), 64);
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 8);
    }
}
