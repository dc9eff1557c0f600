//! Multi-criteria Chinese word segmentation with shared-private Bi-LSTM-CRF
//! models and adversarial training, built on a small tape-based reverse-mode
//! autodiff engine in pure `f64`.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major matrices, the gradient tape, and
//!   finite-difference checking utilities.
//! - [`layers`]: embeddings, the LSTM cell, Bi-LSTM, and dropout.
//! - [`crf`]: exact linear-chain CRF inference over the BMES label set.
//! - [`data`]: BMES codec, corpora, vocabularies, and synthetic corpus
//!   generation.
//! - [`multitask`]: the three shared-private architectures, the criterion
//!   discriminator, and the objective terms.
//! - [`training`]: Adam, gradient routing, and the two-phase trainer.
//! - [`eval`]: word-level precision/recall/F1 and OOV recall.
//! - [`checkpoint`]: versioned model serialization.

pub mod error;
pub mod tensor;
pub mod layers;
pub mod crf;
pub mod data;
pub mod multitask;
pub mod training;
pub mod eval;
pub mod checkpoint;
pub mod cli;

pub use error::{Error, Result};
