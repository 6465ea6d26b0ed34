//! Bidirectional encoder with rotary positions and alternating global /
//! sliding-window attention.
//!
//! The layer pattern is controlled by `global_period`: layer `l` runs full
//! attention iff `l % global_period == 0`, everything else is restricted to a
//! symmetric local window of `window` tokens (`|i - j| <= window / 2`,
//! within-sequence positions). `global_period = 1` with `window = max_seq_len`
//! reproduces an all-global BERT-style encoder.

mod flops;
mod forward;

pub use flops::{count_attention_flops, FlopEstimate, LayerFlops, LayerKind};
pub use forward::{BatchView, ClassifyOutput, ForwardMode, MlmOutput};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Tensor, TensorError};
use crate::packing::PackingError;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("forward on an empty batch")]
    EmptyBatch,
    #[error("layer index {index} out of range ({n_layers} layers)")]
    LayerOutOfRange { index: usize, n_layers: usize },
    #[error("no classification head attached")]
    NoHead,
    #[error("head expects {expected} classes but got label {label}")]
    HeadLabelMismatch { expected: usize, label: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Local attention span; token i sees j iff |i-j| <= window/2. Even.
    pub window: usize,
    /// Layer l is global iff l % global_period == 0.
    pub global_period: usize,
    pub rope_theta_global: f64,
    pub rope_theta_local: f64,
    pub dropout: f64,
}

impl ModelConfig {
    /// Two layers, d_model 64, 512-token context.
    pub fn preset_tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 512,
            window: 128,
            global_period: 3,
            rope_theta_global: 160_000.0,
            rope_theta_local: 10_000.0,
            dropout: 0.1,
        }
    }

    /// Four layers, d_model 128, 1,024-token context.
    pub fn preset_small(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 8,
            d_ff: 512,
            vocab_size,
            max_seq_len: 1024,
            window: 256,
            global_period: 3,
            rope_theta_global: 160_000.0,
            rope_theta_local: 10_000.0,
            dropout: 0.1,
        }
    }

    /// Illustrative full-scale configuration (8,192-token context, 50,368-entry
    /// vocabulary). Recorded for reference; desk runs use the presets above.
    pub fn full_scale_base() -> Self {
        Self {
            n_layers: 22,
            d_model: 768,
            n_heads: 12,
            d_ff: 2304,
            vocab_size: 50_368,
            max_seq_len: 8192,
            window: 128,
            global_period: 3,
            rope_theta_global: 160_000.0,
            rope_theta_local: 10_000.0,
            dropout: 0.1,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::preset_tiny(vocab_size)),
            "small" => Some(Self::preset_small(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("layer/width fields must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return fail(format!(
                "head dim {} must be even for rotary encoding",
                self.d_model / self.n_heads
            ));
        }
        if self.window % 2 != 0 {
            return fail(format!("window {} must be even", self.window));
        }
        if self.window > self.max_seq_len {
            return fail(format!(
                "window {} exceeds max_seq_len {}",
                self.window, self.max_seq_len
            ));
        }
        if self.global_period == 0 {
            return fail("global_period must be >= 1".into());
        }
        if self.vocab_size <= crate::tokenizer::SpecialIds::count() {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_global_layer(&self, layer: usize) -> bool {
        layer % self.global_period == 0
    }

    pub fn n_global_layers(&self) -> usize {
        (0..self.n_layers).filter(|&l| self.is_global_layer(l)).count()
    }

    pub fn rope_theta(&self, layer: usize) -> f64 {
        if self.is_global_layer(layer) {
            self.rope_theta_global
        } else {
            self.rope_theta_local
        }
    }
}

/// Task head attached for fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// One class id per sequence, read from the CLS position.
    SingleLabel { classes: usize },
    /// Independent binary decisions per sequence, read from CLS.
    MultiLabel { labels: usize },
    /// One class id per token.
    TokenLabel { classes: usize },
}

impl HeadKind {
    pub fn n_out(&self) -> usize {
        match *self {
            HeadKind::SingleLabel { classes } => classes,
            HeadKind::MultiLabel { labels } => labels,
            HeadKind::TokenLabel { classes } => classes,
        }
    }
}

/// Encoder parameters plus config. Immutable during inference; training
/// mutates through [`EncoderModel::param_mut`] / the optimizer.
#[derive(Clone, Debug)]
pub struct EncoderModel<S: Scalar> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<S>>,
    head: Option<HeadKind>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> EncoderModel<S> {
    /// Deterministically initializes a fresh model from `seed`.
    ///
    /// Hidden weights are N(0, 0.02); norms start at identity; the MLM head
    /// starts at zero so an untrained model predicts the uniform distribution.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = BTreeMap::new();
        let mut put = |name: String, t: Tensor<S>| {
            params.insert(name, t);
        };
        put(
            "embed.tok".into(),
            Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng),
        );
        for l in 0..config.n_layers {
            for norm in ["attn_norm", "ffn_norm"] {
                put(format!("layer{l}.{norm}.gain"), Tensor::full(vec![d], S::one()));
                put(format!("layer{l}.{norm}.bias"), Tensor::zeros(vec![d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                put(
                    format!("layer{l}.attn.{w}"),
                    Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                );
            }
            put(
                format!("layer{l}.ffn.w1"),
                Tensor::randn(vec![d, config.d_ff], INIT_STD, &mut rng),
            );
            put(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![config.d_ff]));
            put(
                format!("layer{l}.ffn.w2"),
                Tensor::randn(vec![config.d_ff, d], INIT_STD, &mut rng),
            );
            put(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]));
        }
        put("final_norm.gain".into(), Tensor::full(vec![d], S::one()));
        put("final_norm.bias".into(), Tensor::zeros(vec![d]));
        put(
            "mlm_head.w".into(),
            Tensor::zeros(vec![d, config.vocab_size]),
        );
        put("mlm_head.b".into(), Tensor::zeros(vec![config.vocab_size]));
        Ok(Self {
            config,
            params,
            head: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> Option<HeadKind> {
        self.head
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<S>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, ModelError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Attaches (or replaces) a task head with small random weights.
    pub fn attach_head(&mut self, kind: HeadKind, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kind.n_out();
        self.params.insert(
            "head.w".into(),
            Tensor::randn(vec![self.config.d_model, k], INIT_STD, &mut rng),
        );
        self.params.insert("head.b".into(), Tensor::zeros(vec![k]));
        self.head = Some(kind);
    }

    pub fn detach_head(&mut self) {
        self.params.remove("head.w");
        self.params.remove("head.b");
        self.head = None;
    }

    /// Rebuilds a model from persisted parameters (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<S>>,
        head: Option<HeadKind>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let model = Self {
            config,
            params,
            head,
        };
        model.param("embed.tok")?;
        model.param("mlm_head.w")?;
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}
