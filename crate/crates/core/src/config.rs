use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Init, Precision};

/// Where key-value prompts sit relative to the layer's own keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KvPlacement {
    #[default]
    Before,
    After,
}

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d / H)`, the usual multi-head convention.
    #[default]
    PerHead,
    /// `sqrt(d)` over the full embedding width.
    FullWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Visual prompt tokens inserted at every layer.
    pub visual_len: usize,
    /// Key-value prompt columns appended inside every attention block.
    pub kv_len: usize,
    pub kv_placement: KvPlacement,
    /// One tensor serves as both key and value prompt within a layer.
    pub kv_shared: bool,
    pub init: Init,
    /// Segments per visual prompt token for segment-wise pruning.
    pub segments: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            visual_len: 0,
            kv_len: 0,
            kv_placement: KvPlacement::Before,
            kv_shared: true,
            init: Init::He,
            segments: 8,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("prompt.segments must be at least 1".into()));
        }
        if embed_dim % self.segments != 0 {
            return Err(Error::Config(format!(
                "embed_dim {embed_dim} is not divisible by prompt.segments {}",
                self.segments
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    #[serde(default = "default_ffn")]
    pub ffn_multiplier: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
}

fn default_ffn() -> usize {
    2
}

impl ModelConfig {
    /// Small model used by tests and the desk-scale experiments.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_multiplier: 2,
            num_classes,
            attention_scale: AttentionScale::PerHead,
            prompt: PromptConfig {
                segments: 4,
                ..PromptConfig::default()
            },
            precision: Precision::F64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_multiplier", self.ffn_multiplier),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        self.prompt.validate(self.embed_dim)
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened length of one patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.embed_dim * self.ffn_multiplier
    }

    /// Tokens seen by every encoder layer: CLS, visual prompts, patches.
    pub fn seq_len(&self) -> usize {
        1 + self.prompt.visual_len + self.num_patches()
    }

    pub fn attention_divisor(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::PerHead => (self.head_dim() as f64).sqrt(),
            AttentionScale::FullWidth => (self.embed_dim as f64).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let c = ModelConfig::tiny(3);
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 4);
        assert_eq!(c.seq_len(), 5);
        assert_eq!(c.head_dim(), 8);
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let mut c = ModelConfig::tiny(3);
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(3);
        c.prompt.segments = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
            image_size = 8
            patch_size = 4
            channels = 1
            embed_dim = 16
            num_layers = 2
            num_heads = 2
            num_classes = 3
            bogus = 1
        "#;
        assert!(toml::from_str::<ModelConfig>(text).is_err());
    }
}
