use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Preset};
use crate::error::{Error, Result};
use crate::kernels::Matrix;

/// Standard deviation of randomly initialised weight matrices.
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    /// `d_model × 3·d_model`, columns ordered Q | K | V.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f32>,
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub w_up: Matrix,
    pub b_up: Vec<f32>,
    pub w_down: Matrix,
    pub b_down: Vec<f32>,
}

/// Transformer weights. Immutable once built; share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(super) token_embedding: Matrix,
    pub(super) position_embedding: Matrix,
    pub(super) layers: Vec<LayerWeights>,
    pub(super) lnf_gamma: Vec<f32>,
    pub(super) lnf_beta: Vec<f32>,
    /// Untied output projection, `d_model × vocab`.
    lm_head: Option<Matrix>,
    /// `d_model × vocab` matrix actually used for logits; the transposed
    /// embedding when tied.
    pub(super) output_proj: Matrix,
}

/// A named view of one weight tensor, in file directory order.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Expected `(name, shape)` of every tensor for `config`, in directory order.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("token_embedding".to_string(), vec![config.vocab_size, d]),
            ("position_embedding".to_string(), vec![config.max_seq_len, d]),
        ];
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            out.extend([
                (format!("{p}.ln1.gamma"), vec![d]),
                (format!("{p}.ln1.beta"), vec![d]),
                (format!("{p}.attn.w_qkv"), vec![d, 3 * d]),
                (format!("{p}.attn.b_qkv"), vec![3 * d]),
                (format!("{p}.attn.w_out"), vec![d, d]),
                (format!("{p}.attn.b_out"), vec![d]),
                (format!("{p}.ln2.gamma"), vec![d]),
                (format!("{p}.ln2.beta"), vec![d]),
                (format!("{p}.mlp.w_up"), vec![d, config.d_ff]),
                (format!("{p}.mlp.b_up"), vec![config.d_ff]),
                (format!("{p}.mlp.w_down"), vec![config.d_ff, d]),
                (format!("{p}.mlp.b_down"), vec![d]),
            ]);
        }
        out.push(("final_norm.gamma".to_string(), vec![d]));
        out.push(("final_norm.beta".to_string(), vec![d]));
        if !config.tie_embeddings {
            out.push(("lm_head".to_string(), vec![d, config.vocab_size]));
        }
        out
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut data: Vec<&[f32]> = vec![self.token_embedding.data(), self.position_embedding.data()];
        for layer in &self.layers {
            data.extend([
                layer.ln1_gamma.as_slice(),
                &layer.ln1_beta,
                layer.w_qkv.data(),
                &layer.b_qkv,
                layer.w_out.data(),
                &layer.b_out,
                &layer.ln2_gamma,
                &layer.ln2_beta,
                layer.w_up.data(),
                &layer.b_up,
                layer.w_down.data(),
                &layer.b_down,
            ]);
        }
        data.push(&self.lnf_gamma);
        data.push(&self.lnf_beta);
        if let Some(head) = &self.lm_head {
            data.push(head.data());
        }
        Self::tensor_layout(&self.config)
            .into_iter()
            .zip(data)
            .map(|((name, shape), data)| TensorView { name, shape, data })
            .collect()
    }

    /// Build a model from tensors given in [`Model::tensor_layout`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let layout = Self::tensor_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors, expected {}", tensors.len(), layout.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!("{name}: {} values for shape {shape:?}", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} contains non-finite values")));
            }
        }
        let d = config.d_model;
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count checked above");
        let token_embedding = Matrix::from_vec(config.vocab_size, d, next())?;
        let position_embedding = Matrix::from_vec(config.max_seq_len, d, next())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: next(),
                ln1_beta: next(),
                w_qkv: Matrix::from_vec(d, 3 * d, next())?,
                b_qkv: next(),
                w_out: Matrix::from_vec(d, d, next())?,
                b_out: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w_up: Matrix::from_vec(d, config.d_ff, next())?,
                b_up: next(),
                w_down: Matrix::from_vec(config.d_ff, d, next())?,
                b_down: next(),
            });
        }
        let lnf_gamma = next();
        let lnf_beta = next();
        let lm_head = if config.tie_embeddings { None } else { Some(Matrix::from_vec(d, config.vocab_size, next())?) };
        let output_proj = match &lm_head {
            Some(head) => head.clone(),
            None => token_embedding.transpose(),
        };
        Ok(Self { config, token_embedding, position_embedding, layers, lnf_gamma, lnf_beta, lm_head, output_proj })
    }
}

/// Deterministic random weights: matrices drawn from N(0, 0.02²) in
/// directory order from a ChaCha8 stream, biases zero, norm scales one.
pub fn gen_random_model(preset: Preset, seed: u64) -> Model {
    random_model_with_config(preset.config(), seed).expect("preset configs are valid")
}

pub fn random_model_with_config(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let tensors = Model::tensor_layout(&config)
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product::<usize>();
            if shape.len() == 2 {
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            }
        })
        .collect();
    Model::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        assert_eq!(gen_random_model(Preset::Tiny, 7), gen_random_model(Preset::Tiny, 7));
        assert_ne!(gen_random_model(Preset::Tiny, 7), gen_random_model(Preset::Tiny, 8));
    }

    #[test]
    fn parameter_count_matches_config_arithmetic() {
        let model = gen_random_model(Preset::Tiny, 1);
        assert_eq!(model.parameter_count(), model.config().parameter_count());
    }

    #[test]
    fn untied_head_round_trips_through_tensors() {
        let mut config = Preset::Tiny.config();
        config.tie_embeddings = false;
        let model = random_model_with_config(config, 3).unwrap();
        let tensors = model.tensors().iter().map(|t| t.data.to_vec()).collect();
        assert_eq!(Model::from_tensors(config, tensors).unwrap(), model);
    }
}
