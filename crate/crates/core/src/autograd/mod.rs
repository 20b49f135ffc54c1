//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; parameters live in a [`ParamStore`] and are
//! copied onto the tape once per step with [`Tape::param`]. After
//! [`Tape::backward`], [`ParamStore::accumulate`] folds gradients back and
//! [`AdamState::step`] applies the update.

mod adam;
pub mod ctc;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{AdamConfig, AdamState};
pub use ctc::{ctc_feasible, ctc_log_likelihood};
pub use gradcheck::finite_diff_check;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{log_softmax_in_place, softmax_in_place, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutogradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("non-finite value at input {input}, coordinate {coord}")]
    NonFinite { input: usize, coord: usize },
    #[error("ctc: a target of length {target_len} cannot be aligned to {input_len} frames")]
    CtcInfeasible { target_len: usize, input_len: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}
