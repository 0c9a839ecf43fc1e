//! Model dimensions.

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocab;
use crate::error::{CromeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl VisionEncoderConfig {
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(cfg(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        check_heads("vision", self.embed_dim, self.n_heads)?;
        if self.n_layers == 0 {
            return Err(cfg("vision encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        check_heads("lm", self.embed_dim, self.n_heads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFormerConfig {
    pub n_queries: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub cross_attn_every: usize,
    pub max_instruction_len: usize,
    pub mlp_ratio: usize,
}

impl QFormerConfig {
    pub fn has_cross_attention(&self, block: usize) -> bool {
        block % self.cross_attn_every == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.cross_attn_every == 0 {
            return Err(cfg("qformer.cross_attn_every must be positive".into()));
        }
        if self.n_queries == 0 {
            return Err(cfg("qformer needs at least one query".into()));
        }
        check_heads("qformer", self.hidden_dim, self.n_heads)
    }
}

/// Which fusion adapter strategy to build, and its bottleneck width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Registered strategy name: `gated`, `ungated` or `none`.
    pub kind: String,
    pub bottleneck: usize,
    pub init_std: f64,
}

/// Order of the three prefix segments fed to the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceOrder {
    /// question tokens, text-branch output, image-branch output
    #[default]
    QuestionTextImage,
    /// text-branch output, image-branch output, question tokens
    TextImageQuestion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub lm: ToyLmConfig,
    pub qformer: QFormerConfig,
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub sequence_order: SequenceOrder,
}

impl ModelConfig {
    /// Default desk-scale dimensions.
    pub fn toy() -> Self {
        Self {
            vision: VisionEncoderConfig {
                image_size: 16,
                patch_size: 4,
                channels: 3,
                embed_dim: 32,
                n_layers: 2,
                n_heads: 2,
                mlp_ratio: 4,
            },
            lm: ToyLmConfig {
                vocab_size: Vocab::standard().len(),
                embed_dim: 64,
                n_layers: 2,
                n_heads: 4,
                max_seq_len: 64,
                mlp_ratio: 4,
            },
            qformer: QFormerConfig {
                n_queries: 8,
                hidden_dim: 32,
                n_layers: 4,
                n_heads: 2,
                cross_attn_every: 2,
                max_instruction_len: 16,
                mlp_ratio: 4,
            },
            adapter: AdapterConfig { kind: "gated".into(), bottleneck: 16, init_std: 0.02 },
            sequence_order: SequenceOrder::QuestionTextImage,
        }
    }

    pub fn d_llm(&self) -> usize {
        self.lm.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        self.qformer.validate()?;
        if self.adapter.kind != "none" && self.adapter.bottleneck == 0 {
            return Err(cfg("adapter.bottleneck must be positive".into()));
        }
        Ok(())
    }
}

fn check_heads(what: &str, dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(cfg(format!("{what}: dim {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

fn cfg(msg: String) -> CromeError {
    CromeError::Config(msg)
}
