//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

/// Everything the core can reject, with enough context to diagnose.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A vector or parameter buffer has the wrong length.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A spec or config failed validation.
    InvalidSpec(String),
    /// A scalar argument is outside its admissible range.
    OutOfRange { what: &'static str, value: f64 },
    /// A non-finite value appeared where only finite values are allowed.
    NonFinite { what: &'static str, index: usize },
    /// An id is not in the configured vocabulary.
    UnknownId {
        what: &'static str,
        id: usize,
        vocab: usize,
    },
    /// A backward pass was handed a cache from a different forward call.
    CacheMismatch { detail: &'static str },
    /// The velocity oracle has no audio-conditioned branch.
    AdapterUnavailable,
    /// The adapted flow is only defined for a null text condition.
    NonNullText,
    /// A nonempty input was required.
    EmptyInput { what: &'static str },
    /// An all-zero signal has no defined loudness or scale.
    SilentSignal { what: &'static str },
    /// A composed density has zero total mass and cannot be normalized.
    ZeroMass { what: &'static str },
    /// A density must be normalized before this operation.
    NotNormalized { what: &'static str },
    /// Training or integration produced a non-finite state.
    Diverged { what: &'static str, step: usize },
    /// Rejection sampling is accepting too rarely to make progress.
    RejectionStalled { acceptance_rate: f64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimensionMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            CoreError::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            CoreError::OutOfRange { what, value } => {
                write!(f, "{what} out of range: {value}")
            }
            CoreError::NonFinite { what, index } => {
                write!(f, "non-finite value in {what} at index {index}")
            }
            CoreError::UnknownId { what, id, vocab } => {
                write!(f, "unknown {what} id {id} (vocabulary size {vocab})")
            }
            CoreError::CacheMismatch { detail } => {
                write!(f, "activation cache does not match this call: {detail}")
            }
            CoreError::AdapterUnavailable => {
                write!(f, "velocity oracle has no audio-conditioned branch")
            }
            CoreError::NonNullText => {
                write!(f, "adapted velocity requires a null text condition")
            }
            CoreError::EmptyInput { what } => write!(f, "{what} must be nonempty"),
            CoreError::SilentSignal { what } => {
                write!(f, "{what} is silent (all zero); scale undefined")
            }
            CoreError::ZeroMass { what } => {
                write!(f, "{what} has zero total mass; cannot normalize")
            }
            CoreError::NotNormalized { what } => {
                write!(f, "{what} must be normalized first")
            }
            CoreError::Diverged { what, step } => {
                write!(f, "{what} became non-finite at step {step}")
            }
            CoreError::RejectionStalled { acceptance_rate } => write!(
                f,
                "rejection sampler acceptance rate {acceptance_rate:.2e} below 1e-4"
            ),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
