//! Desk-scale workbench for building and evaluating long-context bidirectional
//! encoders.
//!
//! The crate covers the full loop: subword vocabulary training, a minimal
//! reverse-mode autodiff engine, an encoder with rotary position embeddings and
//! alternating global / sliding-window attention, sequence packing (unpadding)
//! with a padded execution twin, two-phase warmup-stable-decay MLM pretraining
//! with checkpoint resume, the downstream fine-tuning / metric protocol
//! (weighted F1, entity-level F1, seed medians), and a fixed/variable-length
//! inference throughput benchmark.
//!
//! Core math is generic over the [`Scalar`] element type; the concrete `f32`
//! aliases below are what the CLI and checkpoint format use.

pub mod bench;
pub mod encoder;
pub mod finetune;
pub mod numerics;
pub mod packing;
pub mod pretrain;
pub mod scalar;
pub mod synth;
pub mod tokenizer;

pub use scalar::Scalar;

/// Runtime tensor type (matches the checkpoint payload format).
pub type Tensor32 = numerics::Tensor<f32>;
/// Double-precision tensor, used where finite-difference conditioning matters.
pub type Tensor64 = numerics::Tensor<f64>;
/// Runtime autodiff tape.
pub type Tape32 = numerics::Tape<f32>;
/// Runtime encoder model.
pub type Model32 = encoder::EncoderModel<f32>;
/// Runtime pretraining driver.
pub type Trainer32 = pretrain::Trainer<f32>;
