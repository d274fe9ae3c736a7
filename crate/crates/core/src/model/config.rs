// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model configuration, read from `config.json` or one of the built-in presets.
//!
//! Field names follow this crate's own convention; the common hub aliases
//! (`d_model`, `encoder_layers`, `n_head`, ...) are accepted as well so a
//! config copied from a pretrained checkpoint resolves to the same metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Arch>,
    #[serde(default, alias = "encoder_layers")]
    pub num_layers_enc: usize,
    #[serde(alias = "decoder_layers", alias = "n_layer", alias = "num_hidden_layers")]
    pub num_layers_dec: usize,
    #[serde(alias = "encoder_attention_heads", alias = "n_head", alias = "num_attention_heads")]
    pub num_heads: usize,
    #[serde(alias = "d_model", alias = "n_embd", alias = "hidden_size")]
    pub hidden_dim: usize,
    #[serde(
        default = "default_max_positions",
        alias = "max_position_embeddings",
        alias = "n_positions"
    )]
    pub max_positions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(
        default,
        alias = "encoder_ffn_dim",
        alias = "n_inner",
        alias = "intermediate_size",
        skip_serializing_if = "Option::is_none"
    )]
    pub ffn_dim: Option<usize>,
    /// Seed for deterministic initialisation when no weight file is present.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

fn default_max_positions() -> usize {
    128
}

fn default_seed() -> u64 {
    42
}

fn default_init_gain() -> f64 {
    1.0
}

const ENCODER_DECODER_TYPES: &[&str] = &[
    "encoder_decoder",
    "marian",
    "bart",
    "mbart",
    "pegasus",
    "t5",
    "mt5",
    "fsmt",
];
const DECODER_ONLY_TYPES: &[&str] = &[
    "decoder_only",
    "gpt2",
    "gpt_neo",
    "gptj",
    "llama",
    "mistral",
    "opt",
    "qwen2",
];

impl ModelConfig {
    /// Resolves the architecture family and checks structural invariants.
    pub fn validate(&mut self) -> Result<Arch> {
        let arch = match (self.arch, self.model_type.as_deref()) {
            (Some(a), _) => a,
            (None, Some(t)) if ENCODER_DECODER_TYPES.contains(&t) => Arch::EncoderDecoder,
            (None, Some(t)) if DECODER_ONLY_TYPES.contains(&t) => Arch::DecoderOnly,
            (None, Some(t)) => return Err(Error::UnsupportedArch(t.to_string())),
            (None, None) if self.num_layers_enc > 0 => Arch::EncoderDecoder,
            (None, None) => Arch::DecoderOnly,
        };
        self.arch = Some(arch);
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers_dec == 0 {
            return Err(Error::Config("num_layers_dec must be at least 1".into()));
        }
        match arch {
            Arch::DecoderOnly if self.num_layers_enc != 0 => {
                return Err(Error::Config(
                    "decoder-only models cannot declare encoder layers".into(),
                ))
            }
            Arch::EncoderDecoder if self.num_layers_enc == 0 => {
                return Err(Error::Config(
                    "encoder-decoder models need at least one encoder layer".into(),
                ))
            }
            _ => {}
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(arch)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.hidden_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    fn preset(arch: Arch, enc: usize, dec: usize, heads: usize, dim: usize) -> Self {
        ModelConfig {
            model_type: None,
            arch: Some(arch),
            num_layers_enc: enc,
            num_layers_dec: dec,
            num_heads: heads,
            hidden_dim: dim,
            max_positions: default_max_positions(),
            vocab_size: None,
            ffn_dim: None,
            seed: default_seed(),
            init_gain: default_init_gain(),
        }
    }

    /// Built-in model ids. These need no files on disk.
    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "tiny-seq2seq" => Some(Self::preset(Arch::EncoderDecoder, 2, 2, 2, 8)),
            "tiny-causal" => Some(Self::preset(Arch::DecoderOnly, 0, 2, 2, 8)),
            "opus-mt-en-zh-like" => {
                let mut c = Self::preset(Arch::EncoderDecoder, 6, 6, 8, 32);
                c.model_type = Some("marian".into());
                Some(c)
            }
            _ => None,
        }
    }
}

/// Names accepted by [`ModelConfig::builtin`].
pub const BUILTIN_MODELS: &[&str] = &["tiny-seq2seq", "tiny-causal", "opus-mt-en-zh-like"];
