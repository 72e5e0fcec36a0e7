//! Crate-wide error type.

use std::fmt;

/// Errors produced anywhere in the pruning laboratory.
#[derive(Debug, Clone, PartialEq)]
pub enum DiepError {
    /// Two tensor shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation received an empty input it cannot handle.
    EmptyInput { what: &'static str },
    /// An index exceeded its valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A node id was requested that the computation record does not contain.
    UnknownNode { id: usize },
    /// A gradient root must be a scalar.
    NotScalar { shape: Vec<usize> },
    /// Routing or enumeration capacity exceeded (k > available experts,
    /// subset count over the enumeration guard, clone overflow).
    Capacity { what: String },
    /// A pruning request cannot be satisfied under the per-layer retention floor.
    Infeasible {
        requested_k: usize,
        max_feasible_k: usize,
    },
    /// A NaN or infinity appeared where finite values are required.
    NonFinite { context: String },
    /// Degenerate input to a similarity computation (constant features,
    /// zero median distance).
    Degenerate { context: String },
    /// Training produced a non-finite loss or gradient.
    TrainingDiverged { step: usize, context: String },
    /// Two inference runs being compared were produced from different streams.
    MismatchedStreams { left: usize, right: usize },
    /// A configuration field failed validation.
    InvalidConfig { field: String, reason: String },
    /// Filesystem failure, with the offending path.
    Io { path: String, reason: String },
    /// A persisted artifact is malformed or of the wrong kind.
    Artifact { reason: String },
    /// A report was written by an incompatible schema major version.
    SchemaVersion { found: u32, supported: u32 },
}

impl fmt::Display for DiepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiepError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            DiepError::EmptyInput { what } => write!(f, "{what}: empty input"),
            DiepError::IndexOutOfRange { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            DiepError::UnknownNode { id } => write!(f, "unknown computation node id {id}"),
            DiepError::NotScalar { shape } => {
                write!(f, "gradient root must be a scalar, got shape {shape:?}")
            }
            DiepError::Capacity { what } => write!(f, "capacity exceeded: {what}"),
            DiepError::Infeasible {
                requested_k,
                max_feasible_k,
            } => write!(
                f,
                "cannot prune {requested_k} experts; retention floors allow at most {max_feasible_k}"
            ),
            DiepError::NonFinite { context } => write!(f, "non-finite value in {context}"),
            DiepError::Degenerate { context } => write!(f, "degenerate input: {context}"),
            DiepError::TrainingDiverged { step, context } => {
                write!(f, "training diverged at step {step}: {context}")
            }
            DiepError::MismatchedStreams { left, right } => write!(
                f,
                "comparison requires identical token streams ({left} vs {right} tokens)"
            ),
            DiepError::InvalidConfig { field, reason } => {
                write!(f, "invalid config field `{field}`: {reason}")
            }
            DiepError::Io { path, reason } => write!(f, "i/o failure on {path}: {reason}"),
            DiepError::Artifact { reason } => write!(f, "bad artifact: {reason}"),
            DiepError::SchemaVersion { found, supported } => write!(
                f,
                "report schema major version {found} unsupported (loader supports {supported})"
            ),
        }
    }
}

impl std::error::Error for DiepError {}

pub type Result<T> = std::result::Result<T, DiepError>;
