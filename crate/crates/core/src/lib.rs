//! Causal-aware emotional support conversation modeling.
//!
//! This crate implements the full stack needed to train and evaluate a
//! cause-aware encoder-decoder for emotional support dialogue on a single
//! CPU core:
//!
//! - [`scalar`] / [`tensor`]: a reverse-mode automatic differentiation graph
//!   over dense row-major matrices, generic over the scalar type
//!   (f32/f64 via `num-traits`); `f64` is the default and the type the rest
//!   of the crate builds on.
//! - [`optim`]: AdamW with decoupled weight decay and linear warmup.
//! - [`gradcheck`]: central finite-difference oracles for verifying
//!   backward passes.
//! - [`corpus`]: dialogue corpus loading, tokenization, vocabulary,
//!   context serialization, splits, and strategy statistics.
//! - [`cause`]: utterance-level cause annotation (lexicon baseline plus
//!   external annotation ingestion) and token-level mask expansion.
//! - [`effects`]: a deterministic commonsense-effect provider (stand-in for
//!   a large generative model) and per-conversation effect bundles.
//! - [`attention`]: self attention, cause-gated attention, fusion gate,
//!   cross-attention blocks, and encoder/decoder layers.
//! - [`model`]: the full model — cause-aware encoding, strategy selection
//!   over a key-value memory, strategy executors, and decoding — plus
//!   variants and ablation toggles, with checkpoint save/load.
//! - [`sample`]: temperature / repetition-penalty / top-k / nucleus
//!   sampling with an inspectable per-step trace.
//! - [`metrics`] / [`agreement`]: corpus BLEU-n, ROUGE-L, Distinct-n,
//!   perplexity, strategy accuracy, and A/B vote aggregation with Fleiss
//!   kappa.
//! - [`train`]: the joint training loop (strategy loss + generation loss)
//!   with periodic dev evaluation and best-checkpoint tracking.
//! - [`container`]: the binary container format shared by effect caches and
//!   model checkpoints.

pub mod agreement;
pub mod attention;
pub mod cause;
pub mod container;
pub mod corpus;
pub mod effects;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sample;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete 64-bit graph used by the model and training code.
pub type Graph = tensor::Graph<f64>;
/// Concrete 32-bit graph, for callers that want the narrow lane.
pub type Graph32 = tensor::Graph<f32>;
pub use tensor::TensorId;
