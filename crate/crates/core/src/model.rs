//! Full multi-task model: shared backbone, per-task heads, lesion
//! selection, cross-interaction and the joint loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::backbone::{self, AttentionRecord, EncoderLayerWeights, ImageTensor};
use crate::config::{FusionMode, ModelConfig, Task};
use crate::data::{stream_rng, Stream, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{self, ConcatWeights, FusionWeights, HeadVars, TaskFeatureVars};
use crate::lesion::{self, SelectionResult};
use crate::params::{join, Initializer, Linear, Parameters, RandomInit, ZeroInit};
use crate::tensor::{self, Scalar};

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub disease: usize,
    /// Multi-hot, one entry per body part.
    pub body_parts: Vec<u8>,
    /// Multi-hot, one entry per attribute.
    pub attributes: Vec<u8>,
}

impl LabelSet {
    pub fn from_ids(disease: usize, body_ids: &[usize], attr_ids: &[usize], n_b: usize, n_a: usize) -> Self {
        let mut body_parts = vec![0u8; n_b];
        let mut attributes = vec![0u8; n_a];
        for &i in body_ids {
            body_parts[i] = 1;
        }
        for &i in attr_ids {
            attributes[i] = 1;
        }
        Self {
            disease,
            body_parts,
            attributes,
        }
    }

    pub fn to_targets(&self, num_diseases: usize) -> SoftTargets {
        let mut disease = vec![0.0; num_diseases];
        disease[self.disease] = 1.0;
        SoftTargets {
            disease,
            body_parts: self.body_parts.iter().map(|&v| v as f32).collect(),
            attributes: self.attributes.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Possibly mixed (soft) training targets for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTargets {
    pub disease: Vec<f32>,
    pub body_parts: Vec<f32>,
    pub attributes: Vec<f32>,
}

/// Attention records grouped by where they were produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMaps<T> {
    pub backbone: Vec<AttentionRecord<T>>,
    pub disease: Vec<AttentionRecord<T>>,
    pub body_part: Vec<AttentionRecord<T>>,
    pub attribute: Vec<AttentionRecord<T>>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Backbone layers followed by the disease head layers; this is the
    /// indexing used for heatmap export.
    pub fn disease_path(&self) -> Vec<&AttentionRecord<T>> {
        self.backbone.iter().chain(&self.disease).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Classifier on the disease class token before fusion.
    pub disease_logits_aux: Vec<T>,
    /// Classifier on the fused disease feature vector.
    pub disease_logits_fused: Vec<T>,
    pub body_part_logits: Option<Vec<T>>,
    pub attribute_logits: Option<Vec<T>>,
    pub selection_disease: Option<SelectionResult<T>>,
    pub selection_attr: Option<SelectionResult<T>>,
    pub attention: AttentionMaps<T>,
}

/// The four loss terms and their sum. Terms of disabled heads are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub disease_aux: f64,
    pub disease_fused: f64,
    pub body_part: f64,
    pub attribute: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(disease_aux: f64, disease_fused: f64, body_part: f64, attribute: f64) -> Self {
        Self {
            disease_aux,
            disease_fused,
            body_part,
            attribute,
            total: disease_aux + disease_fused + body_part + attribute,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.disease_aux + other.disease_aux,
            self.disease_fused + other.disease_fused,
            self.body_part + other.body_part,
            self.attribute + other.attribute,
        )
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(
            self.disease_aux * c,
            self.disease_fused * c,
            self.body_part * c,
            self.attribute * c,
        )
    }
}

/// The encoder layers of one task head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub layers: Vec<EncoderLayerWeights<T>>,
}

impl<T: Scalar> HeadWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.head_layers)
                .map(|_| EncoderLayerWeights::new(init, cfg.embed_dim, cfg.mlp_hidden()))
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for HeadWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Final linear classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifiers<T> {
    pub disease_aux: Linear<T>,
    pub disease_fused: Linear<T>,
    pub body_part: Option<Linear<T>>,
    pub attribute: Option<Linear<T>>,
}

impl<T: Scalar> Parameters<T> for Classifiers<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.disease_aux.visit(&join(prefix, "disease_aux"), f);
        self.disease_fused.visit(&join(prefix, "disease_fused"), f);
        self.body_part.visit(&join(prefix, "body_part"), f);
        self.attribute.visit(&join(prefix, "attribute"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.disease_aux.visit_mut(&join(prefix, "disease_aux"), f);
        self.disease_fused.visit_mut(&join(prefix, "disease_fused"), f);
        self.body_part.visit_mut(&join(prefix, "body_part"), f);
        self.attribute.visit_mut(&join(prefix, "attribute"), f);
    }
}

/// Every trainable tensor of the model plus the configuration that shapes
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub backbone: backbone::BackboneWeights<T>,
    pub disease_head: HeadWeights<T>,
    pub body_head: Option<HeadWeights<T>>,
    pub attr_head: Option<HeadWeights<T>>,
    pub fusion: Option<FusionWeights<T>>,
    pub concat: Option<ConcatWeights<T>>,
    pub classifiers: Classifiers<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn with_init(cfg: &ModelConfig, init: &mut dyn Initializer<T>) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.fusion_dim;
        let backbone = backbone::BackboneWeights::new(init, cfg);
        let disease_head = HeadWeights::new(init, cfg);
        let body_head = cfg.has(Task::BodyPart).then(|| HeadWeights::new(init, cfg));
        let attr_head = cfg.has(Task::Attribute).then(|| HeadWeights::new(init, cfg));
        let (fusion, concat) = match cfg.fusion_mode {
            FusionMode::Cim => (Some(FusionWeights::new(init, cfg)), None),
            FusionMode::Concat => (None, Some(ConcatWeights::new(init, cfg))),
        };
        let classifiers = Classifiers {
            disease_aux: Linear::new(init, cfg.embed_dim, cfg.num_diseases),
            disease_fused: Linear::new(init, f * cfg.feature_blocks(Task::Disease), cfg.num_diseases),
            body_part: cfg
                .has(Task::BodyPart)
                .then(|| Linear::new(init, f * cfg.feature_blocks(Task::BodyPart), cfg.num_body_parts)),
            attribute: cfg
                .has(Task::Attribute)
                .then(|| Linear::new(init, f * cfg.feature_blocks(Task::Attribute), cfg.num_attributes)),
        };
        Ok(Self {
            config: cfg.clone(),
            backbone,
            disease_head,
            body_head,
            attr_head,
            fusion,
            concat,
            classifiers,
        })
    }

    /// Random initialization from a seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        Self::with_init(cfg, &mut RandomInit(&mut rng))
    }

    /// All-zero tensors with the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::with_init(cfg, &mut ZeroInit)
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let mut out = ModelWeights::<U>::zeros(&self.config).expect("config already validated");
        out.assign_from(self);
        out
    }

    /// Gradients for every tensor, in [`Parameters::visit`] order; tensors
    /// the graph did not touch get zeros.
    pub fn collect_gradients(&self, grads: &Gradients<T>) -> Vec<Array2<T>> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| grads.of_param(t).cloned().unwrap_or_else(|| Array2::zeros(t.dim())))
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for ModelWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.disease_head.visit(&join(prefix, "heads.disease"), f);
        self.body_head.visit(&join(prefix, "heads.body_part"), f);
        self.attr_head.visit(&join(prefix, "heads.attribute"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.concat.visit(&join(prefix, "concat"), f);
        self.classifiers.visit(&join(prefix, "classifiers"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.disease_head.visit_mut(&join(prefix, "heads.disease"), f);
        self.body_head.visit_mut(&join(prefix, "heads.body_part"), f);
        self.attr_head.visit_mut(&join(prefix, "heads.attribute"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.concat.visit_mut(&join(prefix, "concat"), f);
        self.classifiers.visit_mut(&join(prefix, "classifiers"), f);
    }
}

/// Logit nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LogitVars {
    pub disease_aux: Var,
    pub disease_fused: Var,
    pub body_part: Option<Var>,
    pub attribute: Option<Var>,
}

struct HeadOutput<T> {
    vars: HeadVars,
    attention: Vec<AttentionRecord<T>>,
    selection: Option<SelectionResult<T>>,
}

fn run_head<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    input: Var,
    head: &'p HeadWeights<T>,
    cfg: &ModelConfig,
    task: Task,
    layer_offset: usize,
) -> Result<HeadOutput<T>> {
    let (tokens, attn) = backbone::encoder_stack_graph(g, input, &head.layers, cfg, &format!("heads.{}", task.name()))?;
    let records: Vec<AttentionRecord<T>> = attn
        .iter()
        .enumerate()
        .map(|(i, h)| backbone::record_of(g, layer_offset + i, h))
        .collect();
    let n = cfg.num_tokens();
    let class_token = g.slice_rows(tokens, 0, 1);
    let patch_tokens = g.slice_rows(tokens, 1, n);
    let (local_token, selection) = if cfg.selects(task) {
        let scores = lesion::head_scores(&records)?;
        let indices = lesion::top_k_indices(&scores, cfg.select_k)?;
        let local = lesion::local_token_graph(g, tokens, &indices);
        let selected_tokens = g.value(tokens).select(ndarray::Axis(0), &indices);
        (
            Some(local),
            Some(SelectionResult {
                scores,
                indices,
                selected_tokens,
            }),
        )
    } else {
        (None, None)
    };
    Ok(HeadOutput {
        vars: HeadVars {
            class_token,
            patch_tokens,
            local_token,
        },
        attention: records,
        selection,
    })
}

/// Builds the whole forward pass on `g`.
pub fn forward_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    image: &ImageTensor,
    w: &'p ModelWeights<T>,
) -> Result<(LogitVars, Prediction<T>)> {
    let cfg = &w.config;
    let (shared, backbone_attn) = backbone::backbone_graph(g, image, &w.backbone, cfg)?;
    let mut attention = AttentionMaps {
        backbone: backbone_attn
            .iter()
            .enumerate()
            .map(|(i, h)| backbone::record_of(g, i, h))
            .collect(),
        ..Default::default()
    };
    let offset = cfg.backbone_layers;

    let disease = run_head(g, shared, &w.disease_head, cfg, Task::Disease, offset)?;
    let body = match (&w.body_head, cfg.has(Task::BodyPart)) {
        (Some(h), true) => Some(run_head(g, shared, h, cfg, Task::BodyPart, offset)?),
        (None, true) => return Err(Error::Config("body-part head weights missing".into())),
        _ => None,
    };
    let attr = match (&w.attr_head, cfg.has(Task::Attribute)) {
        (Some(h), true) => Some(run_head(g, shared, h, cfg, Task::Attribute, offset)?),
        (None, true) => return Err(Error::Config("attribute head weights missing".into())),
        _ => None,
    };

    let features: TaskFeatureVars = match cfg.fusion_mode {
        FusionMode::Cim => {
            let fw = w
                .fusion
                .as_ref()
                .ok_or_else(|| Error::Config("fusion weights missing".into()))?;
            let bv = body.as_ref().map(|h| h.vars);
            let av = attr.as_ref().map(|h| h.vars);
            let fused = fusion::fuse_graph(g, disease.vars, bv, av, fw, cfg)?;
            fusion::concat_fused_graph(g, &fused, disease.vars, bv, av)
        }
        FusionMode::Concat => {
            let cw = w
                .concat
                .as_ref()
                .ok_or_else(|| Error::Config("concat weights missing".into()))?;
            fusion::concat_plain_graph(
                g,
                disease.vars,
                body.as_ref().map(|h| h.vars),
                attr.as_ref().map(|h| h.vars),
                cw,
                cfg.norm_mode,
            )?
        }
    };
    backbone::ensure_finite(g, features.disease, || "fusion".into())?;

    let c = &w.classifiers;
    let logits = LogitVars {
        disease_aux: c.disease_aux.apply(g, disease.vars.class_token),
        disease_fused: c.disease_fused.apply(g, features.disease),
        body_part: match (features.body_part, &c.body_part) {
            (Some(x), Some(l)) => Some(l.apply(g, x)),
            _ => None,
        },
        attribute: match (features.attribute, &c.attribute) {
            (Some(x), Some(l)) => Some(l.apply(g, x)),
            _ => None,
        },
    };
    backbone::ensure_finite(g, logits.disease_fused, || "classifiers".into())?;

    let flat = |v: Var| g.value(v).iter().copied().collect::<Vec<T>>();
    attention.disease = disease.attention;
    let selection_disease = disease.selection;
    let mut selection_attr = None;
    if let Some(b) = body {
        attention.body_part = b.attention;
    }
    if let Some(a) = attr {
        attention.attribute = a.attention;
        selection_attr = a.selection;
    }
    let pred = Prediction {
        disease_logits_aux: flat(logits.disease_aux),
        disease_logits_fused: flat(logits.disease_fused),
        body_part_logits: logits.body_part.map(flat),
        attribute_logits: logits.attribute.map(flat),
        selection_disease,
        selection_attr,
        attention,
    };
    Ok((logits, pred))
}

/// Runs the model on one image.
pub fn forward<T: Scalar>(image: &ImageTensor, w: &ModelWeights<T>) -> Result<Prediction<T>> {
    let mut g = Graph::new();
    forward_graph(&mut g, image, w).map(|(_, p)| p)
}

fn targets_row<T: Scalar>(v: &[f32]) -> Array2<T> {
    Array2::from_shape_fn((1, v.len()), |(_, j)| T::of(v[j] as f64))
}

/// Loss nodes for one sample, each already multiplied by `scale`
/// (typically `1 / batch_size`).
pub struct LossVars {
    pub disease_aux: Var,
    pub disease_fused: Var,
    pub body_part: Option<Var>,
    pub attribute: Option<Var>,
    pub total: Var,
}

pub fn loss_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    logits: &LogitVars,
    targets: &SoftTargets,
    scale: T,
) -> LossVars {
    let ce_aux = g.cross_entropy(logits.disease_aux, targets_row(&targets.disease));
    let ce_aux = g.scale(ce_aux, scale);
    let ce_fused = g.cross_entropy(logits.disease_fused, targets_row(&targets.disease));
    let ce_fused = g.scale(ce_fused, scale);
    let body_part = logits.body_part.map(|z| {
        let l = g.bce_with_logits(z, targets_row(&targets.body_parts));
        g.scale(l, scale)
    });
    let attribute = logits.attribute.map(|z| {
        let l = g.bce_with_logits(z, targets_row(&targets.attributes));
        g.scale(l, scale)
    });
    let mut total = g.add(ce_aux, ce_fused);
    for t in [body_part, attribute].into_iter().flatten() {
        total = g.add(total, t);
    }
    LossVars {
        disease_aux: ce_aux,
        disease_fused: ce_fused,
        body_part,
        attribute,
        total,
    }
}

fn scalar_of<T: Scalar>(g: &Graph<'_, T>, v: Option<Var>) -> f64 {
    v.map(|v| g.value(v)[[0, 0]].to_f64_lossy()).unwrap_or(0.0)
}

pub(crate) fn breakdown_of<T: Scalar>(g: &Graph<'_, T>, l: &LossVars) -> LossBreakdown {
    LossBreakdown::new(
        scalar_of(g, Some(l.disease_aux)),
        scalar_of(g, Some(l.disease_fused)),
        scalar_of(g, l.body_part),
        scalar_of(g, l.attribute),
    )
}

/// Loss of one sample scaled by `scale` and its gradient for every
/// parameter (in visit order).
pub fn sample_gradients<T: Scalar>(
    w: &ModelWeights<T>,
    image: &ImageTensor,
    targets: &SoftTargets,
    scale: T,
) -> Result<(LossBreakdown, Vec<Array2<T>>)> {
    let mut g = Graph::new();
    let (logits, _) = forward_graph(&mut g, image, w)?;
    let loss = loss_graph(&mut g, &logits, targets, scale);
    let grads = g.backward(loss.total);
    Ok((breakdown_of(&g, &loss), w.collect_gradients(&grads)))
}

/// Mean loss of a batch without gradients.
pub fn batch_loss<T: Scalar>(
    w: &ModelWeights<T>,
    images: &[ImageTensor],
    targets: &[SoftTargets],
) -> Result<LossBreakdown> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::Config(
            "batch needs matching, non-empty images and targets".into(),
        ));
    }
    let scale = T::one() / T::from_usize(images.len()).unwrap();
    let mut acc = LossBreakdown::default();
    for (img, t) in images.iter().zip(targets) {
        let mut g = Graph::new();
        let (logits, _) = forward_graph(&mut g, img, w)?;
        let loss = loss_graph(&mut g, &logits, t, scale);
        acc = acc.add(&breakdown_of(&g, &loss));
    }
    Ok(acc)
}

fn check_batch<T>(logits: &[Vec<T>], targets: &[Vec<f32>]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Config("loss needs at least one sample".into()));
    }
    if logits.len() != targets.len() || logits.iter().zip(targets).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("logits and targets disagree in shape".into()));
    }
    Ok(())
}

/// Mean soft-target cross entropy over a batch.
pub fn ce_loss<T: Scalar>(logits: &[Vec<T>], targets: &[Vec<f32>]) -> Result<f64> {
    check_batch(logits, targets)?;
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(z, y)| {
            let y: Vec<T> = y.iter().map(|&v| T::of(v as f64)).collect();
            tensor::cross_entropy_row(z, &y).0.to_f64_lossy()
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Mean (over samples) of summed binary cross entropies.
pub fn bce_loss<T: Scalar>(logits: &[Vec<T>], targets: &[Vec<f32>]) -> Result<f64> {
    check_batch(logits, targets)?;
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(z, y)| {
            let y: Vec<T> = y.iter().map(|&v| T::of(v as f64)).collect();
            tensor::bce_with_logits_row(z, &y).to_f64_lossy()
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Joint loss over a batch of predictions.
pub fn total_loss<T: Scalar>(preds: &[Prediction<T>], targets: &[SoftTargets]) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        return Err(Error::Shape("one target per prediction required".into()));
    }
    let d: Vec<Vec<f32>> = targets.iter().map(|t| t.disease.clone()).collect();
    let aux: Vec<Vec<T>> = preds.iter().map(|p| p.disease_logits_aux.clone()).collect();
    let fused: Vec<Vec<T>> = preds.iter().map(|p| p.disease_logits_fused.clone()).collect();
    let multi =
        |get: &dyn Fn(&Prediction<T>) -> Option<Vec<T>>, tgt: &dyn Fn(&SoftTargets) -> Vec<f32>| -> Result<f64> {
            let logits: Option<Vec<Vec<T>>> = preds.iter().map(get).collect();
            match logits {
                Some(l) => bce_loss(&l, &targets.iter().map(tgt).collect::<Vec<_>>()),
                None => Ok(0.0),
            }
        };
    Ok(LossBreakdown::new(
        ce_loss(&aux, &d)?,
        ce_loss(&fused, &d)?,
        multi(&|p| p.body_part_logits.clone(), &|t| t.body_parts.clone())?,
        multi(&|p| p.attribute_logits.clone(), &|t| t.attributes.clone())?,
    ))
}

/// Decision thresholds for the multi-label heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub body_part: f64,
    pub attribute: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            body_part: 0.5,
            attribute: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub name: Option<String>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelOutput {
    /// Labels whose probability reaches the threshold, by descending
    /// probability.
    pub present: Vec<ClassScore>,
    pub probabilities: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedTokens {
    pub disease: Option<Vec<usize>>,
    pub attribute: Option<Vec<usize>>,
}

/// Inference result: ranked differential diagnosis plus multi-label sets
/// and the lesion tokens that were selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub differential: Vec<ClassScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub body_parts: Option<MultiLabelOutput>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attributes: Option<MultiLabelOutput>,
    pub selected_tokens: SelectedTokens,
}

fn multi_label<T: Scalar>(logits: &[T], threshold: f64, names: Option<&[String]>) -> MultiLabelOutput {
    let probabilities: Vec<f64> = logits.iter().map(|&z| tensor::sigmoid(z).to_f64_lossy()).collect();
    let mut present: Vec<ClassScore> = probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(id, &p)| ClassScore {
            id,
            name: names.and_then(|n| n.get(id).cloned()),
            probability: p,
        })
        .collect();
    present.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.id.cmp(&b.id)));
    MultiLabelOutput {
        present,
        probabilities,
        threshold,
    }
}

/// Turns a prediction into a [`Diagnosis`].
pub fn diagnose<T: Scalar>(pred: &Prediction<T>, thresholds: Thresholds, vocab: Option<&Vocabulary>) -> Diagnosis {
    let probs = tensor::softmax_slice(&pred.disease_logits_fused);
    let mut differential: Vec<ClassScore> = probs
        .iter()
        .enumerate()
        .map(|(id, &p)| ClassScore {
            id,
            name: vocab.and_then(|v| v.disease.get(id).cloned()),
            probability: p.to_f64_lossy(),
        })
        .collect();
    differential.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.id.cmp(&b.id)));
    Diagnosis {
        differential,
        body_parts: pred
            .body_part_logits
            .as_ref()
            .map(|z| multi_label(z, thresholds.body_part, vocab.map(|v| v.body_part.as_slice()))),
        attributes: pred
            .attribute_logits
            .as_ref()
            .map(|z| multi_label(z, thresholds.attribute, vocab.map(|v| v.attribute.as_slice()))),
        selected_tokens: SelectedTokens {
            disease: pred.selection_disease.as_ref().map(|s| s.indices.clone()),
            attribute: pred.selection_attr.as_ref().map(|s| s.indices.clone()),
        },
    }
}

/// Forward pass followed by [`diagnose`].
pub fn infer<T: Scalar>(
    image: &ImageTensor,
    w: &ModelWeights<T>,
    thresholds: Thresholds,
    vocab: Option<&Vocabulary>,
) -> Result<Diagnosis> {
    Ok(diagnose(&forward(image, w)?, thresholds, vocab))
}
