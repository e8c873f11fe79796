//! GPT-2 style decoder: weights, the binary weight format, byte-level
//! tokenizer, and the forward passes.
//!
//! The serving path ([`Model::prefill`], [`Model::decode_step`]) reads and
//! writes KV exclusively through a [`crate::kv::TilePool`].
//! [`Model::reference_forward`] recomputes everything densely and exists as
//! the oracle the paged path is checked against.

mod config;
mod format;
mod forward;
pub mod tokenizer;
mod weights;

pub use config::{ModelConfig, Preset};
pub use format::{decode_model, encode_model, load_model, save_model, MAGIC};
pub use forward::{greedy_sample, DecodeItem, Logits, PrefillItem};
pub use weights::{gen_random_model, random_model_with_config, LayerWeights, Model, TensorView};
