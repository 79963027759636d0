//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by core operations. Variant names follow the contracts of
/// the individual operations (`EqualCountRequired`, `OracleTooLarge`, ...).
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Empirical distributions must have the same number of samples.
    EqualCountRequired { left: usize, right: usize },
    /// The brute-force transport oracle only enumerates up to n = 8.
    OracleTooLarge { n: usize, max: usize },
    /// Vector/tensor dimensions do not agree.
    DimensionMismatch { expected: String, got: String },
    /// Inputs must be non-empty.
    EmptyInput,
    /// The p exponent of a Wasserstein distance must be positive.
    InvalidExponent(f64),
    /// A Stiefel-manifold parameter drifted off the manifold.
    ManifoldDrift { frobenius: f64, tolerance: f64 },
    /// The CTC label cannot be aligned within the given number of time steps.
    LabelTooLong {
        label_len: usize,
        min_steps: usize,
        steps: usize,
    },
    /// A rendered label does not fit on the canvas.
    DoesNotFit { label_len: usize, max_chars: usize },
    /// Rendering an empty label is rejected unless explicitly allowed.
    EmptyLabel,
    /// A non-finite value showed up where finite math was required.
    NumericalFailure(String),
    /// Generic invalid-argument error with context.
    InvalidArgument(String),
    /// A required checkpoint/model input was absent.
    MissingModel(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::EqualCountRequired { left, right } => {
                write!(f, "equal sample counts required, got {left} vs {right}")
            }
            CoreError::OracleTooLarge { n, max } => {
                write!(f, "brute-force oracle limited to n <= {max}, got {n}")
            }
            CoreError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            CoreError::EmptyInput => write!(f, "input must be non-empty"),
            CoreError::InvalidExponent(p) => write!(f, "exponent p must be positive, got {p}"),
            CoreError::ManifoldDrift {
                frobenius,
                tolerance,
            } => {
                write!(
                    f,
                    "matrix off the Stiefel manifold: ||T'T - I||_F = {frobenius} > {tolerance}"
                )
            }
            CoreError::LabelTooLong {
                label_len,
                min_steps,
                steps,
            } => {
                write!(
                    f,
                    "label of length {label_len} needs at least {min_steps} steps, got {steps}"
                )
            }
            CoreError::DoesNotFit {
                label_len,
                max_chars,
            } => {
                write!(
                    f,
                    "label of {label_len} chars does not fit (max {max_chars})"
                )
            }
            CoreError::EmptyLabel => write!(f, "empty label rejected"),
            CoreError::NumericalFailure(what) => write!(f, "numerical failure: {what}"),
            CoreError::InvalidArgument(what) => write!(f, "invalid argument: {what}"),
            CoreError::MissingModel(what) => write!(f, "missing model: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
