//! Shared ViT backbone: patch embedding, class token, positional embedding
//! and pre-norm transformer encoder layers that expose their attention.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, NormMode};
use crate::error::{Error, Result};
use crate::params::{join, Init, Initializer, LayerNorm, Linear, Parameters};
use crate::tensor::{self, Scalar};

/// An RGB image with values in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "image".into(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer sized from dimensions")
    }
}

/// Class token followed by the patch tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Array2<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn class_token(&self) -> ndarray::ArrayView1<'_, T> {
        self.tokens.row(0)
    }

    pub fn patch_tokens(&self) -> ndarray::ArrayView2<'_, T> {
        self.tokens.slice(ndarray::s![1.., ..])
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Post-softmax attention of one encoder layer, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub layer_index: usize,
    pub matrices: Vec<Array2<T>>,
}

impl<T: Scalar> AttentionRecord<T> {
    pub fn num_heads(&self) -> usize {
        self.matrices.len()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.matrices
            .iter()
            .flat_map(|m| m.rows().into_iter().map(|r| (r.sum().to_f64_lossy() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Weights of one pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights<T> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> EncoderLayerWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, dim: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(init, dim),
            query: Linear::new(init, dim, dim),
            key: Linear::new(init, dim, dim),
            value: Linear::new(init, dim, dim),
            proj: Linear::new(init, dim, dim),
            norm2: LayerNorm::new(init, dim),
            fc1: Linear::new(init, dim, hidden),
            fc2: Linear::new(init, hidden, dim),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderLayerWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.query.visit(&join(prefix, "attn.query"), f);
        self.key.visit(&join(prefix, "attn.key"), f);
        self.value.visit(&join(prefix, "attn.value"), f);
        self.proj.visit(&join(prefix, "attn.proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.query.visit_mut(&join(prefix, "attn.query"), f);
        self.key.visit_mut(&join(prefix, "attn.key"), f);
        self.value.visit_mut(&join(prefix, "attn.value"), f);
        self.proj.visit_mut(&join(prefix, "attn.proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Patch projection, class token, positional embedding and encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: Array2<T>,
    pub pos_embed: Array2<T>,
    pub layers: Vec<EncoderLayerWeights<T>>,
}

impl<T: Scalar> BackboneWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_embed: Linear::new(init, cfg.patch_dim(), d),
            cls_token: init.tensor(Init::Normal(0.02), 1, d),
            pos_embed: init.tensor(Init::Normal(0.02), cfg.num_tokens(), d),
            layers: (0..cfg.backbone_layers)
                .map(|_| EncoderLayerWeights::new(init, d, cfg.mlp_hidden()))
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for BackboneWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &self.cls_token);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cls_token"), &mut self.cls_token);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

fn check_image(image: &ImageTensor, cfg: &ModelConfig) -> Result<()> {
    if image.height() != cfg.image_height || image.width() != cfg.image_width {
        return Err(Error::Config(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    if !image.height().is_multiple_of(cfg.patch_size) || !image.width().is_multiple_of(cfg.patch_size) {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {}",
            image.height(),
            image.width(),
            cfg.patch_size
        )));
    }
    Ok(())
}

/// Splits an image into `N_p` flattened patches in row-major grid order.
/// Each patch row is laid out as `(y, x, channel)` within the patch.
pub fn patchify<T: Scalar>(image: &ImageTensor, cfg: &ModelConfig) -> Result<Array2<T>> {
    check_image(image, cfg)?;
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid();
    let mut out = Array2::zeros((gr * gc, cfg.patch_dim()));
    for py in 0..gr {
        for px in 0..gc {
            let mut row = out.row_mut(py * gc + px);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        row[k] = T::of(image.get(py * p + y, px * p + x, c) as f64);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Array2<T>, cfg: &ModelConfig) -> Result<ImageTensor> {
    if patches.dim() != (cfg.num_patches(), cfg.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch matrix {:?}, expected {:?}",
            patches.dim(),
            (cfg.num_patches(), cfg.patch_dim())
        )));
    }
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid();
    let mut img = ImageTensor::zeros(cfg.image_height, cfg.image_width);
    for py in 0..gr {
        for px in 0..gc {
            let row = patches.row(py * gc + px);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        img.set(py * p + y, px * p + x, c, row[k].to_f64_lossy() as f32);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

pub(crate) fn ensure_finite<T: Scalar>(g: &Graph<'_, T>, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if tensor::all_finite(g.value(v)) {
        Ok(())
    } else {
        Err(Error::Numeric { location: location() })
    }
}

/// Graph form of [`embed`].
pub fn embed_graph<'p, T: Scalar>(g: &mut Graph<'p, T>, patches: Var, w: &'p BackboneWeights<T>) -> Var {
    let proj = w.patch_embed.apply(g, patches);
    let cls = g.param(&w.cls_token);
    let seq = g.concat_rows(&[cls, proj]);
    let pos = g.param(&w.pos_embed);
    g.add(seq, pos)
}

/// Graph form of [`encoder_layer`]: returns the output tokens and one
/// attention node per head.
pub fn encoder_layer_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    x: Var,
    w: &'p EncoderLayerWeights<T>,
    num_heads: usize,
    norm: NormMode,
) -> (Var, Vec<Var>) {
    let dim = g.value(x).ncols();
    let head_dim = dim / num_heads;
    let scale = T::one() / T::of(head_dim as f64).sqrt();

    let h = w.norm1.apply(g, x, norm);
    let q = w.query.apply(g, h);
    let k = w.key.apply(g, h);
    let v = w.value.apply(g, h);

    let mut heads = Vec::with_capacity(num_heads);
    let mut attention = Vec::with_capacity(num_heads);
    for m in 0..num_heads {
        let (lo, hi) = (m * head_dim, (m + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits);
        attention.push(a);
        heads.push(g.matmul(a, vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let attn_out = w.proj.apply(g, merged);
    let x = g.add(x, attn_out);

    let h = w.norm2.apply(g, x, norm);
    let hidden = w.fc1.apply(g, h);
    let hidden = g.gelu(hidden);
    let mlp_out = w.fc2.apply(g, hidden);
    (g.add(x, mlp_out), attention)
}

pub(crate) fn record_of<T: Scalar>(g: &Graph<'_, T>, layer_index: usize, heads: &[Var]) -> AttentionRecord<T> {
    AttentionRecord {
        layer_index,
        matrices: heads.iter().map(|&a| g.value(a).clone()).collect(),
    }
}

/// Runs a stack of encoder layers on the graph, checking every output for
/// non-finite values. `name` labels errors (e.g. `backbone`).
pub(crate) fn encoder_stack_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    mut x: Var,
    layers: &'p [EncoderLayerWeights<T>],
    cfg: &ModelConfig,
    name: &str,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut attention = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (y, heads) = encoder_layer_graph(g, x, layer, cfg.num_heads, cfg.norm_mode);
        ensure_finite(g, y, || format!("{name}.layers.{i}"))?;
        attention.push(heads);
        x = y;
    }
    Ok((x, attention))
}

/// Builds the backbone on `g`; returns final tokens and per-layer
/// attention nodes.
pub fn backbone_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    image: &ImageTensor,
    w: &'p BackboneWeights<T>,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let patches = patchify::<T>(image, cfg)?;
    let patches = g.constant(patches);
    let x = embed_graph(g, patches, w);
    ensure_finite(g, x, || "backbone.embed".into())?;
    encoder_stack_graph(g, x, &w.layers, cfg, "backbone")
}

/// Projects patches and prepends the class token; adds positional
/// embeddings to every row.
pub fn embed<T: Scalar>(patches: &Array2<T>, w: &BackboneWeights<T>) -> Result<TokenSequence<T>> {
    if patches.nrows() + 1 != w.pos_embed.nrows() || patches.ncols() != w.patch_embed.in_dim() {
        return Err(Error::Shape(format!(
            "patches {:?} do not fit projection {:?} with {} positions",
            patches.dim(),
            w.patch_embed.weight.dim(),
            w.pos_embed.nrows()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(patches.clone());
    let y = embed_graph(&mut g, p, w);
    Ok(TokenSequence {
        tokens: g.value(y).clone(),
    })
}

/// One pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn encoder_layer<T: Scalar>(
    tokens: &TokenSequence<T>,
    w: &EncoderLayerWeights<T>,
    cfg: &ModelConfig,
    layer_index: usize,
) -> Result<(TokenSequence<T>, AttentionRecord<T>)> {
    if tokens.tokens.ncols() != w.query.in_dim() {
        return Err(Error::Shape(format!(
            "tokens have width {}, layer expects {}",
            tokens.tokens.ncols(),
            w.query.in_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.tokens.clone());
    let (y, heads) = encoder_layer_graph(&mut g, x, w, cfg.num_heads, cfg.norm_mode);
    ensure_finite(&g, y, || format!("layers.{layer_index}"))?;
    Ok((
        TokenSequence {
            tokens: g.value(y).clone(),
        },
        record_of(&g, layer_index, &heads),
    ))
}

/// patchify, embed and the full encoder stack.
pub fn forward_backbone<T: Scalar>(
    image: &ImageTensor,
    w: &BackboneWeights<T>,
    cfg: &ModelConfig,
) -> Result<(TokenSequence<T>, Vec<AttentionRecord<T>>)> {
    let mut g = Graph::new();
    let (y, attn) = backbone_graph(&mut g, image, w, cfg)?;
    let records = attn.iter().enumerate().map(|(i, h)| record_of(&g, i, h)).collect();
    Ok((
        TokenSequence {
            tokens: g.value(y).clone(),
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{RandomInit, ZeroInit};
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn cfg_with(h: usize, w: usize, p: usize, d: usize, heads: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            image_height: h,
            image_width: w,
            patch_size: p,
            embed_dim: d,
            fusion_dim: d,
            num_heads: heads,
            backbone_layers: layers,
            select_k: 1,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn full_input_has_576_patches() {
        let cfg = ModelConfig::full();
        let img = ImageTensor::zeros(384, 384);
        let p: Array2<f32> = patchify(&img, &cfg).unwrap();
        assert_eq!(p.dim(), (576, 768));
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = cfg_with(8, 8, 8, 64, 4, 1);
        let img = random_image(&mut rng, 8, 8);
        let p: Array2<f32> = patchify(&img, &cfg).unwrap();
        assert_eq!(p.nrows(), 1);
        assert_eq!(p.row(0).to_vec(), img.data().to_vec());
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = cfg_with(16, 24, 8, 64, 4, 1);
        let mut img = ImageTensor::zeros(16, 24);
        // mark the top-left pixel of each patch with its grid index
        for py in 0..2 {
            for px in 0..3 {
                img.set(py * 8, px * 8, 0, (py * 3 + px) as f32);
            }
        }
        let p: Array2<f32> = patchify(&img, &cfg).unwrap();
        for i in 0..6 {
            assert_eq!(p[[i, 0]], i as f32);
        }
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = ModelConfig::desk();
        let img = ImageTensor::zeros(60, 64);
        assert!(matches!(patchify::<f32>(&img, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn embed_zero_everything_is_zero() {
        let cfg = ModelConfig::desk();
        let w: BackboneWeights<f32> = BackboneWeights::new(&mut ZeroInit, &cfg);
        let patches = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
        let t = embed(&patches, &w).unwrap();
        assert_eq!(t.tokens.dim(), (65, 64));
        assert!(t.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_identity_projection_adds_position() {
        // one 2x2 patch: patch_dim = 12 = embed_dim
        let cfg = cfg_with(2, 2, 2, 12, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w: BackboneWeights<f64> = BackboneWeights::new(&mut RandomInit(&mut rng), &cfg);
        w.patch_embed.weight = Array2::eye(12);
        w.patch_embed.bias.fill(0.0);
        let patches = Array2::from_shape_fn((1, 12), |(_, j)| j as f64 * 0.1);
        let t = embed(&patches, &w).unwrap();
        for j in 0..12 {
            assert_eq!(t.tokens[[1, j]], patches[[0, j]] + w.pos_embed[[1, j]]);
            assert_eq!(t.tokens[[0, j]], w.cls_token[[0, j]] + w.pos_embed[[0, j]]);
        }
    }

    #[test]
    fn zero_layer_with_identity_norm_is_residual_only() {
        let mut cfg = cfg_with(16, 16, 8, 8, 2, 1);
        cfg.norm_mode = NormMode::Identity;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: EncoderLayerWeights<f64> = EncoderLayerWeights::new(&mut ZeroInit, 8, 32);
        let x = TokenSequence {
            tokens: Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0)),
        };
        let (y, rec) = encoder_layer(&x, &w, &cfg, 0).unwrap();
        assert_eq!(y, x);
        assert!(rec.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn nan_input_names_the_layer() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: EncoderLayerWeights<f32> = EncoderLayerWeights::new(&mut RandomInit(&mut rng), 64, 256);
        let mut tokens = Array2::zeros((65, 64));
        tokens[[3, 3]] = f32::NAN;
        let err = encoder_layer(&TokenSequence { tokens }, &w, &cfg, 7).unwrap_err();
        match err {
            Error::Numeric { location } => assert_eq!(location, "layers.7"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_layer_backbone_returns_embedding() {
        let cfg = cfg_with(16, 16, 8, 8, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: BackboneWeights<f64> = BackboneWeights::new(&mut RandomInit(&mut rng), &cfg);
        let img = random_image(&mut rng, 16, 16);
        let (out, recs) = forward_backbone(&img, &w, &cfg).unwrap();
        let emb = embed(&patchify(&img, &cfg).unwrap(), &w).unwrap();
        assert!(recs.is_empty());
        assert_eq!(out, emb);
    }

    #[test]
    fn desk_backbone_shapes() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: BackboneWeights<f32> = BackboneWeights::new(&mut RandomInit(&mut rng), &cfg);
        let img = random_image(&mut rng, 64, 64);
        let (out, recs) = forward_backbone(&img, &w, &cfg).unwrap();
        assert_eq!(out.tokens.dim(), (65, 64));
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert_eq!(r.num_heads(), 4);
            assert_eq!(r.matrices[0].dim(), (65, 65));
            assert!(r.max_row_sum_error() < 1e-5);
        }
        assert_eq!(out.class_token().len(), 64);
        assert_eq!(out.patch_tokens().len_of(Axis(0)), 64);
    }
}
