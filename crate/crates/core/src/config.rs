use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three prediction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Disease,
    BodyPart,
    Attribute,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Disease, Task::BodyPart, Task::Attribute];

    pub fn name(self) -> &'static str {
        match self {
            Task::Disease => "disease",
            Task::BodyPart => "body_part",
            Task::Attribute => "attribute",
        }
    }
}

/// How the per-task representations are combined before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Plain concatenation of class tokens, pooled patch features and
    /// local tokens.
    Concat,
    /// Pooled cross-attention between task heads.
    Cim,
}

/// Test hook: `Identity` replaces every layer normalization with the
/// identity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Standard,
    Identity,
}

/// Key/value source for cross-attention fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CimKeys {
    /// A single key built from the layer-normalized mean of the other
    /// head's patch tokens. With one key the attention weight is always 1.
    #[default]
    Pooled,
    /// Experimental: attend over every layer-normalized patch token of the
    /// other head.
    FullSequence,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub backbone_layers: usize,
    pub head_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub select_k: usize,
    pub num_diseases: usize,
    pub num_body_parts: usize,
    pub num_attributes: usize,
    pub fusion_dim: usize,
    pub enabled_heads: Vec<Task>,
    pub lsm_enabled: bool,
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default)]
    pub cim_keys: CimKeys,
}

impl ModelConfig {
    /// Full-size configuration: 384x384 input, 16px patches, ViT-B widths.
    pub fn full() -> Self {
        Self {
            image_height: 384,
            image_width: 384,
            patch_size: 16,
            embed_dim: 768,
            backbone_layers: 12,
            head_layers: 2,
            num_heads: 12,
            mlp_ratio: 4.0,
            select_k: 24,
            num_diseases: 49,
            num_body_parts: 15,
            num_attributes: 27,
            fusion_dim: 768,
            enabled_heads: Task::ALL.to_vec(),
            lsm_enabled: true,
            fusion_mode: FusionMode::Cim,
            norm_mode: NormMode::Standard,
            cim_keys: CimKeys::Pooled,
        }
    }

    /// CPU-sized configuration used by tests and the synthetic dataset.
    pub fn desk() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            embed_dim: 64,
            backbone_layers: 4,
            head_layers: 2,
            num_heads: 4,
            mlp_ratio: 4.0,
            select_k: 8,
            num_diseases: 3,
            num_body_parts: 4,
            num_attributes: 5,
            fusion_dim: 64,
            enabled_heads: Task::ALL.to_vec(),
            lsm_enabled: true,
            fusion_mode: FusionMode::Cim,
            norm_mode: NormMode::Standard,
            cim_keys: CimKeys::Pooled,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn has(&self, task: Task) -> bool {
        self.enabled_heads.contains(&task)
    }

    pub fn num_classes(&self, task: Task) -> usize {
        match task {
            Task::Disease => self.num_diseases,
            Task::BodyPart => self.num_body_parts,
            Task::Attribute => self.num_attributes,
        }
    }

    /// Whether `task` runs lesion selection.
    pub fn selects(&self, task: Task) -> bool {
        self.lsm_enabled && self.has(task) && matches!(task, Task::Disease | Task::Attribute)
    }

    /// Number of `fusion_dim`-wide blocks in the feature vector fed to the
    /// final classifier of `task`.
    pub fn feature_blocks(&self, task: Task) -> usize {
        let b = self.has(Task::BodyPart) as usize;
        let a = self.has(Task::Attribute) as usize;
        let lsm = self.lsm_enabled as usize;
        match (task, self.fusion_mode) {
            (Task::Disease, FusionMode::Cim) => a + 1 + lsm,
            (Task::Disease, FusionMode::Concat) => 1 + b + a + lsm,
            (Task::BodyPart, _) => 2,
            (Task::Attribute, _) => 2 + lsm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_height == 0 || self.image_width == 0 {
            return fail("image and patch sizes must be positive".into());
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !self.fusion_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "fusion_dim {} not divisible by num_heads {}",
                self.fusion_dim, self.num_heads
            ));
        }
        if self.fusion_dim != self.embed_dim {
            return fail("fusion_dim must equal embed_dim (no projection between heads and fusion)".into());
        }
        if self.select_k == 0 || self.select_k > self.num_patches() {
            return fail(format!("select_k {} outside 1..={}", self.select_k, self.num_patches()));
        }
        if self.head_layers == 0 {
            return fail("head_layers must be at least 1".into());
        }
        if self.mlp_hidden() == 0 {
            return fail("mlp_ratio yields an empty hidden layer".into());
        }
        if !self.has(Task::Disease) {
            return fail("the disease head must be enabled".into());
        }
        for task in Task::ALL {
            if self.has(task) && self.num_classes(task) == 0 {
                return fail(format!("{} head enabled with zero classes", task.name()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn full_preset_has_576_tokens() {
        let c = ModelConfig::full();
        assert_eq!(c.num_patches(), 576);
        assert_eq!(c.select_k, 24);
    }

    #[test]
    fn desk_grid() {
        let c = ModelConfig::desk();
        assert_eq!(c.grid(), (8, 8));
        assert_eq!(c.num_tokens(), 65);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.num_heads = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.select_k = 65;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk();
        c.enabled_heads = vec![Task::BodyPart];
        assert!(c.validate().is_err());
    }

    #[test]
    fn feature_blocks_follow_enabled_heads() {
        let c = ModelConfig::desk();
        assert_eq!(c.feature_blocks(Task::Disease), 3);
        assert_eq!(c.feature_blocks(Task::BodyPart), 2);
        assert_eq!(c.feature_blocks(Task::Attribute), 3);

        let mut d = ModelConfig::desk();
        d.enabled_heads = vec![Task::Disease];
        d.lsm_enabled = false;
        assert_eq!(d.feature_blocks(Task::Disease), 1);

        let mut cat = ModelConfig::desk();
        cat.fusion_mode = FusionMode::Concat;
        assert_eq!(cat.feature_blocks(Task::Disease), 4);
    }

    #[test]
    fn config_json_defaults_optional_fields() {
        let mut v = serde_json::to_value(ModelConfig::desk()).unwrap();
        v.as_object_mut().unwrap().remove("norm_mode");
        v.as_object_mut().unwrap().remove("cim_keys");
        let c: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.norm_mode, NormMode::Standard);
        assert_eq!(c.cim_keys, CimKeys::Pooled);
    }
}
