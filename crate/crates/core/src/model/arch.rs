// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture descriptor and the `model.toml` configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Checkpoint naming family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Learned absolute positions, LayerNorm, GELU MLP, fused `c_attn`.
    Gpt2,
    /// Rotary positions, RMSNorm, SwiGLU MLP, separate projections.
    Llama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    LearnedAbsolute,
    Rotary,
}

/// Normalization applied to each sublayer input (always pre-norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Shapes and hyperparameters a forward pass needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub family: Family,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads (grouped-query attention); equals `n_heads` for GPT-2.
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional: PositionalScheme,
    pub norm: NormKind,
    pub norm_eps: f32,
    pub rope_theta: f32,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.positional == PositionalScheme::Rotary && self.d_head % 2 != 0 {
            return Err(Error::Config("rotary positions need an even d_head".into()));
        }
        Ok(())
    }

    /// Key/value head shared by query head `h`.
    #[inline]
    pub fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }
}

// ---------------------------------------------------------------------------
// model.toml
// ---------------------------------------------------------------------------

/// Contents of `model.toml`, which sits next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub tokenizer: TokenizerConfig,
    /// Checkpoint file name relative to the config (default `model.safetensors`).
    #[serde(default = "default_weights")]
    pub weights: String,
}

fn default_weights() -> String {
    "model.safetensors".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: Family,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: Option<usize>,
    pub d_model: usize,
    /// Explicit head dimension; defaults to `d_model / n_heads`.
    pub d_head: Option<usize>,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub norm_eps: Option<f32>,
    pub rope_theta: Option<f32>,
}

impl ArchConfig {
    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        let d_head = match self.d_head {
            Some(d) => d,
            None => {
                if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                    return Err(Error::Shape(format!(
                        "d_model {} is not divisible by n_heads {} and no d_head override is given",
                        self.d_model, self.n_heads
                    )));
                }
                self.d_model / self.n_heads
            }
        };
        let (positional, norm, eps) = match self.family {
            Family::Gpt2 => (PositionalScheme::LearnedAbsolute, NormKind::LayerNorm, 1e-5),
            Family::Llama => (PositionalScheme::Rotary, NormKind::RmsNorm, 1e-5),
        };
        let arch = ArchDescriptor {
            family: self.family,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads.unwrap_or(self.n_heads),
            d_model: self.d_model,
            d_head,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            positional,
            norm,
            norm_eps: self.norm_eps.unwrap_or(eps),
            rope_theta: self.rope_theta.unwrap_or(10_000.0),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Tokenizer section of `model.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKindConfig,
    /// Pretokenizer regex family for byte-level BPE.
    #[serde(default)]
    pub pretokenizer: Option<PretokenizerKind>,
    #[serde(default = "default_vocab")]
    pub vocab: String,
    #[serde(default)]
    pub merges: Option<String>,
    /// Literal tokens matched before pretokenization (e.g. `<|endoftext|>`).
    #[serde(default)]
    pub special_tokens: Vec<String>,
    #[serde(default)]
    pub bos_token: Option<String>,
    #[serde(default)]
    pub pad_token: Option<String>,
    /// Chat wrapper used when rendering prompts.
    #[serde(default)]
    pub chat_template: ChatTemplate,
}

fn default_vocab() -> String {
    "vocab.json".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKindConfig {
    ByteBpe,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PretokenizerKind {
    #[default]
    Gpt2,
    Llama3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ChatTemplate {
    /// Prompt text is used as-is, followed by an `Answer:` cue.
    #[default]
    Plain,
    /// Llama-3 instruct headers around system/user/assistant turns.
    Llama3,
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("model.toml: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}
