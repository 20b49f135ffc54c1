//! Core of a non-autoregressive translation (NAT) trainer whose training
//! target is produced by a *rephraser*: a shallow non-causal decoder that
//! rewrites the reference so it agrees with what the NAT model is about to
//! emit, trained with REINFORCE against an annealed mix of a likelihood
//! reward and a BLEU similarity reward.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! `std` feature. Everything that touches files, processes or the clock
//! lives in the `natr` companion crate.
//!
//! Module map:
//!
//! - [`autograd`]: tape-based reverse-mode AD over flat row-major tensors,
//!   Adam, and a central finite-difference gradient checker.
//! - [`model`]: encoder, NAT decoder, length predictor and rephraser for the
//!   vanilla, CMLM and CTC model kinds.
//! - [`losses`]: cross-entropy variants, CTC marginal likelihood, collapse.
//! - [`rewards`]: likelihood and BLEU rewards, annealing, sampling and the
//!   REINFORCE estimator with a sampled baseline.
//! - [`data`]: vocabulary, corpora, the synthetic two-mode task, batching.
//! - [`decode`] and [`metrics`]: inference procedures and evaluation.
//! - [`train`]: the pre-training and fine-tuning steps.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod decode;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rewards;
pub mod train;

pub use autograd::{
    AdamConfig, AdamState, AutogradError, ParamId, ParamStore, Real, Tape, Tensor, Var,
};
pub use data::{Batch, CmlmMask, Corpus, EncodedPair, Pair, SyntheticTaskConfig, Vocabulary};
pub use model::{ModelConfig, ModelKind, NatModel, RephraserVariant};

use alloc::string::String;

/// Errors raised above the autograd layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sentence {index} is empty")]
    EmptySentence { index: usize },
    #[error("sentence {index} has {len} tokens, more than max_len {max}")]
    TooLong {
        index: usize,
        len: usize,
        max: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown token `{token}`")]
    UnknownToken { token: String },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error(
        "content vocabulary of {vocab} tokens cannot fill distinct sentences of length {max_len}"
    )]
    VocabTooSmall { vocab: usize, max_len: usize },
    #[error("non-finite {what} at step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        step: u64,
        detail: String,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
