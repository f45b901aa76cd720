//! Cross-interaction between the disease, body-part and attribute heads.
//!
//! Notation used in field names: `disease_from_body` is the disease class
//! token enhanced with body-part context (g^B_D), `body_from_disease` the
//! converse (g^D_B), and likewise for attributes and the local tokens.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::config::{CimKeys, FusionMode, ModelConfig, NormMode, Task};
use crate::error::{Error, Result};
use crate::params::{join, Init, Initializer, LayerNorm, Linear, Parameters};
use crate::tensor::Scalar;

/// Output of one task head, ready for fusion. Vectors are `1 x F` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures<T> {
    pub class_token: Array2<T>,
    pub patch_tokens: Array2<T>,
    /// Mean of the lesion-selected tokens (disease and attribute heads with
    /// selection enabled).
    pub local_token: Option<Array2<T>>,
}

/// Fused tokens; entries for absent heads are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusedFeatures<T> {
    pub disease_from_body: Option<Array2<T>>,
    pub body_from_disease: Option<Array2<T>>,
    pub disease_from_attr: Option<Array2<T>>,
    pub attr_from_disease: Option<Array2<T>>,
    pub local_disease_from_attr: Option<Array2<T>>,
    pub local_attr_from_disease: Option<Array2<T>>,
}

/// One cross-attention direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights<T> {
    pub query_norm: LayerNorm<T>,
    pub key_norm: LayerNorm<T>,
    pub w_query: Array2<T>,
    pub w_key: Array2<T>,
    pub w_value: Array2<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> CrossAttnWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, dim: usize) -> Self {
        Self {
            query_norm: LayerNorm::new(init, dim),
            key_norm: LayerNorm::new(init, dim),
            w_query: init.tensor(Init::Xavier, dim, dim),
            w_key: init.tensor(Init::Xavier, dim, dim),
            w_value: init.tensor(Init::Xavier, dim, dim),
            out: Linear::new(init, dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.nrows()
    }
}

impl<T: Scalar> Parameters<T> for CrossAttnWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.query_norm.visit(&join(prefix, "query_norm"), f);
        self.key_norm.visit(&join(prefix, "key_norm"), f);
        f(join(prefix, "w_query"), &self.w_query);
        f(join(prefix, "w_key"), &self.w_key);
        f(join(prefix, "w_value"), &self.w_value);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.query_norm.visit_mut(&join(prefix, "query_norm"), f);
        self.key_norm.visit_mut(&join(prefix, "key_norm"), f);
        f(join(prefix, "w_query"), &mut self.w_query);
        f(join(prefix, "w_key"), &mut self.w_key);
        f(join(prefix, "w_value"), &mut self.w_value);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Cross-attention weights for every direction the enabled heads need.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T> {
    pub disease_from_body: Option<CrossAttnWeights<T>>,
    pub body_from_disease: Option<CrossAttnWeights<T>>,
    pub disease_from_attr: Option<CrossAttnWeights<T>>,
    pub attr_from_disease: Option<CrossAttnWeights<T>>,
    pub local_disease_from_attr: Option<CrossAttnWeights<T>>,
    pub local_attr_from_disease: Option<CrossAttnWeights<T>>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, cfg: &ModelConfig) -> Self {
        let f = cfg.fusion_dim;
        let body = cfg.has(Task::BodyPart);
        let attr = cfg.has(Task::Attribute);
        let local = attr && cfg.lsm_enabled;
        let mut make = |on: bool| on.then(|| CrossAttnWeights::new(init, f));
        Self {
            disease_from_body: make(body),
            body_from_disease: make(body),
            disease_from_attr: make(attr),
            attr_from_disease: make(attr),
            local_disease_from_attr: make(local),
            local_attr_from_disease: make(local),
        }
    }
}

impl<T: Scalar> Parameters<T> for FusionWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.disease_from_body.visit(&join(prefix, "disease_from_body"), f);
        self.body_from_disease.visit(&join(prefix, "body_from_disease"), f);
        self.disease_from_attr.visit(&join(prefix, "disease_from_attr"), f);
        self.attr_from_disease.visit(&join(prefix, "attr_from_disease"), f);
        self.local_disease_from_attr
            .visit(&join(prefix, "local_disease_from_attr"), f);
        self.local_attr_from_disease
            .visit(&join(prefix, "local_attr_from_disease"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.disease_from_body.visit_mut(&join(prefix, "disease_from_body"), f);
        self.body_from_disease.visit_mut(&join(prefix, "body_from_disease"), f);
        self.disease_from_attr.visit_mut(&join(prefix, "disease_from_attr"), f);
        self.attr_from_disease.visit_mut(&join(prefix, "attr_from_disease"), f);
        self.local_disease_from_attr
            .visit_mut(&join(prefix, "local_disease_from_attr"), f);
        self.local_attr_from_disease
            .visit_mut(&join(prefix, "local_attr_from_disease"), f);
    }
}

/// Layer norms for the pooled features used by the concatenation baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatWeights<T> {
    pub disease_pool: Option<LayerNorm<T>>,
    pub body_pool: Option<LayerNorm<T>>,
    pub attr_pool: Option<LayerNorm<T>>,
}

impl<T: Scalar> ConcatWeights<T> {
    pub fn new(init: &mut dyn Initializer<T>, cfg: &ModelConfig) -> Self {
        let f = cfg.fusion_dim;
        let others = cfg.has(Task::BodyPart) || cfg.has(Task::Attribute);
        let mut make = |on: bool| on.then(|| LayerNorm::new(init, f));
        Self {
            disease_pool: make(others),
            body_pool: make(cfg.has(Task::BodyPart)),
            attr_pool: make(cfg.has(Task::Attribute)),
        }
    }
}

impl<T: Scalar> Parameters<T> for ConcatWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.disease_pool.visit(&join(prefix, "disease_pool"), f);
        self.body_pool.visit(&join(prefix, "body_pool"), f);
        self.attr_pool.visit(&join(prefix, "attr_pool"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.disease_pool.visit_mut(&join(prefix, "disease_pool"), f);
        self.body_pool.visit_mut(&join(prefix, "body_pool"), f);
        self.attr_pool.visit_mut(&join(prefix, "attr_pool"), f);
    }
}

/// Graph handles for one head's features.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub class_token: Var,
    pub patch_tokens: Var,
    pub local_token: Option<Var>,
}

/// Graph handles mirroring [`FusedFeatures`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FusedVars {
    pub disease_from_body: Option<Var>,
    pub body_from_disease: Option<Var>,
    pub disease_from_attr: Option<Var>,
    pub attr_from_disease: Option<Var>,
    pub local_disease_from_attr: Option<Var>,
    pub local_attr_from_disease: Option<Var>,
}

/// Per-task feature vectors handed to the final classifiers.
#[derive(Debug, Clone, Copy)]
pub struct TaskFeatureVars {
    pub disease: Var,
    pub body_part: Option<Var>,
    pub attribute: Option<Var>,
}

/// `LN(GAP(patches))`.
pub fn pool_norm_graph<'p, T: Scalar>(g: &mut Graph<'p, T>, patches: Var, ln: &'p LayerNorm<T>, mode: NormMode) -> Var {
    let pooled = g.mean_rows(patches);
    ln.apply(g, pooled, mode)
}

/// Cross-attention of a single query token over `keys` (`m x F`), with the
/// layer-normalized query added back as residual.
pub fn cross_attend_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    query: Var,
    keys: Var,
    w: &'p CrossAttnWeights<T>,
    num_heads: usize,
    mode: NormMode,
) -> (Var, Vec<Var>) {
    let dim = w.dim();
    let head_dim = dim / num_heads;
    let scale = T::one() / T::of(head_dim as f64).sqrt();

    let qn = w.query_norm.apply(g, query, mode);
    let wq = g.param(&w.w_query);
    let wk = g.param(&w.w_key);
    let wv = g.param(&w.w_value);
    let q = g.matmul(qn, wq);
    let k = g.matmul(keys, wk);
    let v = g.matmul(keys, wv);

    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for m in 0..num_heads {
        let (lo, hi) = (m * head_dim, (m + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits);
        weights.push(a);
        heads.push(g.matmul(a, vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    let projected = w.out.apply(g, merged);
    (g.add(qn, projected), weights)
}

fn keys_from_patches<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    patches: Var,
    w: &'p CrossAttnWeights<T>,
    cfg: &ModelConfig,
) -> Var {
    match cfg.cim_keys {
        CimKeys::Pooled => pool_norm_graph(g, patches, &w.key_norm, cfg.norm_mode),
        CimKeys::FullSequence => w.key_norm.apply(g, patches, cfg.norm_mode),
    }
}

fn direction<'p, T: Scalar>(w: &'p Option<CrossAttnWeights<T>>, name: &str) -> Result<&'p CrossAttnWeights<T>> {
    w.as_ref()
        .ok_or_else(|| Error::Config(format!("fusion weights for {name} are missing")))
}

/// Body-part fusion first; the body-enhanced disease token then replaces
/// the raw one as the query for attribute fusion. Local tokens are fused
/// last, each using the other's layer-normalized local token as its key.
pub fn fuse_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    disease: HeadVars,
    body: Option<HeadVars>,
    attr: Option<HeadVars>,
    w: &'p FusionWeights<T>,
    cfg: &ModelConfig,
) -> Result<FusedVars> {
    let heads = cfg.num_heads;
    let mode = cfg.norm_mode;
    let mut out = FusedVars::default();
    let mut disease_query = disease.class_token;

    if let Some(body) = body {
        let wd = direction(&w.disease_from_body, "disease_from_body")?;
        let keys = keys_from_patches(g, body.patch_tokens, wd, cfg);
        let (fused, _) = cross_attend_graph(g, disease.class_token, keys, wd, heads, mode);
        out.disease_from_body = Some(fused);
        disease_query = fused;

        let wb = direction(&w.body_from_disease, "body_from_disease")?;
        let keys = keys_from_patches(g, disease.patch_tokens, wb, cfg);
        out.body_from_disease = Some(cross_attend_graph(g, body.class_token, keys, wb, heads, mode).0);
    }

    if let Some(attr) = attr {
        let wd = direction(&w.disease_from_attr, "disease_from_attr")?;
        let keys = keys_from_patches(g, attr.patch_tokens, wd, cfg);
        out.disease_from_attr = Some(cross_attend_graph(g, disease_query, keys, wd, heads, mode).0);

        let wa = direction(&w.attr_from_disease, "attr_from_disease")?;
        let keys = keys_from_patches(g, disease.patch_tokens, wa, cfg);
        out.attr_from_disease = Some(cross_attend_graph(g, attr.class_token, keys, wa, heads, mode).0);

        if let (Some(ld), Some(la)) = (disease.local_token, attr.local_token) {
            let wl = direction(&w.local_disease_from_attr, "local_disease_from_attr")?;
            let key = wl.key_norm.apply(g, la, mode);
            out.local_disease_from_attr = Some(cross_attend_graph(g, ld, key, wl, heads, mode).0);

            let wl = direction(&w.local_attr_from_disease, "local_attr_from_disease")?;
            let key = wl.key_norm.apply(g, ld, mode);
            out.local_attr_from_disease = Some(cross_attend_graph(g, la, key, wl, heads, mode).0);
        }
    }
    Ok(out)
}

/// Assembles the classifier inputs after cross-interaction.
///
/// * disease: `[g^A_D] ++ [g^B_D or g_D] ++ [l^A_D or l_D]`
/// * body part: `[g_B, g^D_B]`
/// * attribute: `[g_A, g^D_A] ++ [l^D_A]`
///
/// Bracketed pieces appear only when their inputs exist.
pub fn concat_fused_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    fused: &FusedVars,
    disease: HeadVars,
    body: Option<HeadVars>,
    attr: Option<HeadVars>,
) -> TaskFeatureVars {
    let mut d = Vec::with_capacity(3);
    d.extend(fused.disease_from_attr);
    d.push(fused.disease_from_body.unwrap_or(disease.class_token));
    if let Some(l) = fused.local_disease_from_attr.or(disease.local_token) {
        d.push(l);
    }
    let body_part = body.map(|b| {
        let parts = [b.class_token, fused.body_from_disease.expect("body fusion computed")];
        g.concat_cols(&parts)
    });
    let attribute = attr.map(|a| {
        let mut parts = vec![
            a.class_token,
            fused.attr_from_disease.expect("attribute fusion computed"),
        ];
        if let Some(l) = fused.local_attr_from_disease.or(a.local_token) {
            parts.push(l);
        }
        g.concat_cols(&parts)
    });
    let disease = if d.len() == 1 { d[0] } else { g.concat_cols(&d) };
    TaskFeatureVars {
        disease,
        body_part,
        attribute,
    }
}

/// Concatenation baseline without cross-attention.
///
/// * disease: `[g_D] ++ [z_B] ++ [z_A] ++ [l_D]`
/// * body part: `[g_B, z_D]`
/// * attribute: `[g_A, z_D] ++ [l_A]`
///
/// where `z_X = LN(GAP(patches of X))`.
pub fn concat_plain_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    disease: HeadVars,
    body: Option<HeadVars>,
    attr: Option<HeadVars>,
    w: &'p ConcatWeights<T>,
    mode: NormMode,
) -> Result<TaskFeatureVars> {
    let missing = |n: &str| Error::Config(format!("concat pool norm {n} is missing"));
    let z_disease = match (&w.disease_pool, body.is_some() || attr.is_some()) {
        (Some(ln), true) => Some(pool_norm_graph(g, disease.patch_tokens, ln, mode)),
        (None, true) => return Err(missing("disease_pool")),
        _ => None,
    };
    let mut d = vec![disease.class_token];
    if let Some(b) = body {
        let ln = w.body_pool.as_ref().ok_or_else(|| missing("body_pool"))?;
        d.push(pool_norm_graph(g, b.patch_tokens, ln, mode));
    }
    if let Some(a) = attr {
        let ln = w.attr_pool.as_ref().ok_or_else(|| missing("attr_pool"))?;
        d.push(pool_norm_graph(g, a.patch_tokens, ln, mode));
    }
    d.extend(disease.local_token);
    let disease_vec = if d.len() == 1 { d[0] } else { g.concat_cols(&d) };
    let body_part = body.map(|b| g.concat_cols(&[b.class_token, z_disease.unwrap()]));
    let attribute = attr.map(|a| {
        let mut parts = vec![a.class_token, z_disease.unwrap()];
        parts.extend(a.local_token);
        g.concat_cols(&parts)
    });
    Ok(TaskFeatureVars {
        disease: disease_vec,
        body_part,
        attribute,
    })
}

fn check_row<T: Scalar>(x: &Array2<T>, dim: usize, what: &str) -> Result<()> {
    if x.dim() != (1, dim) {
        return Err(Error::Config(format!(
            "{what} has shape {:?}, expected (1, {dim})",
            x.dim()
        )));
    }
    Ok(())
}

/// `LN(GAP(patch_tokens))` as a `1 x F` row.
pub fn pool_norm<T: Scalar>(patch_tokens: &Array2<T>, ln: &LayerNorm<T>, mode: NormMode) -> Result<Array2<T>> {
    if patch_tokens.nrows() == 0 {
        return Err(Error::Shape("pool_norm needs at least one token".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(patch_tokens.clone());
    let y = pool_norm_graph(&mut g, p, ln, mode);
    Ok(g.value(y).clone())
}

/// Cross-attention of `query` over the single key `pooled`; also returns
/// the per-head attention weights.
pub fn cross_attend_with_weights<T: Scalar>(
    query: &Array2<T>,
    pooled: &Array2<T>,
    w: &CrossAttnWeights<T>,
    num_heads: usize,
    mode: NormMode,
) -> Result<(Array2<T>, Vec<Array2<T>>)> {
    let dim = w.dim();
    if num_heads == 0 || !dim.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "fusion dim {dim} not divisible by {num_heads} heads"
        )));
    }
    check_row(query, dim, "query token")?;
    if pooled.ncols() != dim || pooled.nrows() == 0 {
        return Err(Error::Config(format!(
            "keys have shape {:?}, expected (m, {dim})",
            pooled.dim()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let k = g.constant(pooled.clone());
    let (y, weights) = cross_attend_graph(&mut g, q, k, w, num_heads, mode);
    Ok((
        g.value(y).clone(),
        weights.iter().map(|&a| g.value(a).clone()).collect(),
    ))
}

pub fn cross_attend<T: Scalar>(
    query: &Array2<T>,
    pooled: &Array2<T>,
    w: &CrossAttnWeights<T>,
    num_heads: usize,
    mode: NormMode,
) -> Result<Array2<T>> {
    cross_attend_with_weights(query, pooled, w, num_heads, mode).map(|(y, _)| y)
}

fn head_vars<T: Scalar>(g: &mut Graph<'_, T>, h: &HeadFeatures<T>, dim: usize, name: &str) -> Result<HeadVars> {
    check_row(&h.class_token, dim, &format!("{name} class token"))?;
    if h.patch_tokens.ncols() != dim || h.patch_tokens.nrows() == 0 {
        return Err(Error::Config(format!(
            "{name} patch tokens have shape {:?}",
            h.patch_tokens.dim()
        )));
    }
    if let Some(l) = &h.local_token {
        check_row(l, dim, &format!("{name} local token"))?;
    }
    Ok(HeadVars {
        class_token: g.constant(h.class_token.clone()),
        patch_tokens: g.constant(h.patch_tokens.clone()),
        local_token: h.local_token.as_ref().map(|l| g.constant(l.clone())),
    })
}

/// Runs every fusion direction available for the given heads.
pub fn fuse_all<T: Scalar>(
    disease: &HeadFeatures<T>,
    body: Option<&HeadFeatures<T>>,
    attr: Option<&HeadFeatures<T>>,
    w: &FusionWeights<T>,
    cfg: &ModelConfig,
) -> Result<FusedFeatures<T>> {
    let dim = cfg.fusion_dim;
    let mut g = Graph::new();
    let d = head_vars(&mut g, disease, dim, "disease")?;
    let b = body.map(|h| head_vars(&mut g, h, dim, "body_part")).transpose()?;
    let a = attr.map(|h| head_vars(&mut g, h, dim, "attribute")).transpose()?;
    let fused = fuse_graph(&mut g, d, b, a, w, cfg)?;
    let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
    Ok(FusedFeatures {
        disease_from_body: get(fused.disease_from_body),
        body_from_disease: get(fused.body_from_disease),
        disease_from_attr: get(fused.disease_from_attr),
        attr_from_disease: get(fused.attr_from_disease),
        local_disease_from_attr: get(fused.local_disease_from_attr),
        local_attr_from_disease: get(fused.local_attr_from_disease),
    })
}

/// Per-task classifier inputs as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFeatures<T> {
    pub disease: Vec<T>,
    pub body_part: Option<Vec<T>>,
    pub attribute: Option<Vec<T>>,
}

/// Concatenates fused (or, in concat mode, pooled) features per task.
pub fn concat_for_heads<T: Scalar>(
    fused: &FusedFeatures<T>,
    disease: &HeadFeatures<T>,
    body: Option<&HeadFeatures<T>>,
    attr: Option<&HeadFeatures<T>>,
    concat: Option<&ConcatWeights<T>>,
    cfg: &ModelConfig,
) -> Result<TaskFeatures<T>> {
    let dim = cfg.fusion_dim;
    let mut g = Graph::new();
    let d = head_vars(&mut g, disease, dim, "disease")?;
    let b = body.map(|h| head_vars(&mut g, h, dim, "body_part")).transpose()?;
    let a = attr.map(|h| head_vars(&mut g, h, dim, "attribute")).transpose()?;
    let vars = match cfg.fusion_mode {
        FusionMode::Cim => {
            let mut c = |x: &Option<Array2<T>>| x.as_ref().map(|v| g.constant(v.clone()));
            let fv = FusedVars {
                disease_from_body: c(&fused.disease_from_body),
                body_from_disease: c(&fused.body_from_disease),
                disease_from_attr: c(&fused.disease_from_attr),
                attr_from_disease: c(&fused.attr_from_disease),
                local_disease_from_attr: c(&fused.local_disease_from_attr),
                local_attr_from_disease: c(&fused.local_attr_from_disease),
            };
            concat_fused_graph(&mut g, &fv, d, b, a)
        }
        FusionMode::Concat => {
            let w = concat.ok_or_else(|| Error::Config("concat mode needs concat weights".into()))?;
            concat_plain_graph(&mut g, d, b, a, w, cfg.norm_mode)?
        }
    };
    let flat = |v: Var| g.value(v).iter().copied().collect::<Vec<T>>();
    Ok(TaskFeatures {
        disease: flat(vars.disease),
        body_part: vars.body_part.map(flat),
        attribute: vars.attribute.map(flat),
    })
}
