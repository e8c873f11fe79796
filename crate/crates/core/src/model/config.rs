use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenizer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub eos_token: u32,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f32,
    /// Output projection shares the token embedding matrix.
    #[serde(default = "default_tied")]
    pub tie_embeddings: bool,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.eos_token as usize >= self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "eos_token {} outside vocabulary of {}",
                self.eos_token, self.vocab_size
            )));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::InvalidConfig("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Total number of scalars across all weight tensors.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        let head = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        let (d_model, n_layers, n_heads, d_ff, max_seq_len) = match self {
            Preset::Tiny => (64, 2, 4, 256, 1024),
            Preset::Small => (128, 4, 8, 512, 1024),
        };
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model / n_heads,
            d_ff,
            max_seq_len,
            eos_token: tokenizer::EOS,
            layer_norm_eps: default_eps(),
            tie_embeddings: true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}
