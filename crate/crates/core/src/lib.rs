//! Gradient-guided adversarial inputs for sequence-to-sequence models.
//!
//! The crate bundles everything needed to train a small transformer
//! translation model with doubly adversarial inputs and to measure how
//! much that buys under input noise:
//!
//! - [`graph`] and [`tensor`]: dense tensors with tape-based reverse-mode
//!   differentiation.
//! - [`transformer`]: the encoder-decoder translation model.
//! - [`bilm`]: bidirectional language models used to propose replacements.
//! - [`advgen`]: the adversarial sentence generator and its pieces.
//! - [`robust`]: the robustness loss, the four-term objective, training and
//!   checkpoints.
//! - [`data`]: vocabularies, corpora, batching and synthetic tasks.
//! - [`eval`]: BLEU, synthetic noise, robustness curves and ablations.

pub mod advgen;
pub mod bilm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod robust;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{GradBuffer, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

/// Index into a vocabulary.
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
