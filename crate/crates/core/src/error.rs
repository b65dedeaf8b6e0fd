//! Crate-wide error type. Numeric failures (NaN/Inf) abort the operation
//! that produced them instead of propagating poisoned values.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes incompatible for an operation; names the offending node.
    ShapeMismatch { context: String },
    /// A computed value went non-finite; names the node that produced it.
    NonFinite { context: String },
    /// API misuse (e.g. backward before forward, unbound input).
    Usage { context: String },
    /// Invalid configuration (unstable env params, bad schedule length, ...).
    Config { context: String },
    /// An operation that requires data received none.
    EmptyData { context: String },
}

impl CoreError {
    pub fn shape(context: impl Into<String>) -> Self {
        CoreError::ShapeMismatch { context: context.into() }
    }
    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite { context: context.into() }
    }
    pub fn usage(context: impl Into<String>) -> Self {
        CoreError::Usage { context: context.into() }
    }
    pub fn config(context: impl Into<String>) -> Self {
        CoreError::Config { context: context.into() }
    }
    pub fn empty(context: impl Into<String>) -> Self {
        CoreError::EmptyData { context: context.into() }
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            CoreError::NonFinite { context } => write!(f, "non-finite value: {context}"),
            CoreError::Usage { context } => write!(f, "usage error: {context}"),
            CoreError::Config { context } => write!(f, "config error: {context}"),
            CoreError::EmptyData { context } => write!(f, "empty data: {context}"),
        }
    }
}

impl std::error::Error for CoreError {}

pub type Result<T> = std::result::Result<T, CoreError>;
