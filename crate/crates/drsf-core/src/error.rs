//! Error type shared across the core crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor operations, module forward passes, and the
/// benchmark generator.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible with the operation's contract.
    ShapeMismatch(String),
    /// An argument violates a precondition (negative learning rate,
    /// invalid distribution, out-of-range attention, ...).
    InvalidArgument(String),
    /// A NaN or infinity was produced or supplied. Non-finite values are
    /// rejected eagerly instead of being propagated.
    NonFinite(String),
    /// Pseudo-domain and held-out target transforms are too close for the
    /// targets to count as unseen.
    DomainOverlap(String),
    /// Serialized data failed validation (hash mismatch, truncation,
    /// unknown version).
    CorruptData(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::DomainOverlap(m) => write!(f, "domain overlap: {m}"),
            CoreError::CorruptData(m) => write!(f, "corrupt data: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
