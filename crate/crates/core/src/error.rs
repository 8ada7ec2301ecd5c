//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Errors surfaced by the engine, numerics, and analysis code.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Input contained NaN or infinite entries.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A probability vector failed validation (negative mass or sum far from 1).
    #[error("invalid probability distribution: {reason}")]
    InvalidDistribution { reason: String },

    /// Token id outside the vocabulary.
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    /// Layer index outside the model depth.
    #[error("layer index {layer} out of range for {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },

    /// Position index outside the sequence.
    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    /// Forward pass got an empty token sequence.
    #[error("empty token sequence")]
    EmptySequence,

    /// Sequence longer than the model's maximum.
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    /// Model configuration violates a structural invariant.
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },

    /// Fact implantation ran out of room (FFN rows, head width, or hidden dims).
    #[error("implant capacity exceeded: {reason}")]
    CapacityExceeded { reason: String },

    /// Two facts share a subject token.
    #[error("duplicate subject key: token {subject}")]
    DuplicateSubject { subject: usize },

    /// A constructed model failed its build-time behavioural check.
    #[error("implant verification failed: {reason}")]
    ImplantCheckFailed { reason: String },

    /// Weights file has a bad magic string or unsupported version.
    #[error("weights format error: {reason}")]
    WeightsFormat { reason: String },

    /// Weights file ended before all tensors were read.
    #[error("weights file truncated while reading {what}")]
    WeightsTruncated { what: String },

    /// Tensor dims in a weights file disagree with the declared config.
    #[error("weights shape mismatch for {tensor}: expected {expected:?}, got {got:?}")]
    WeightsShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// No steering magnitude in the search range achieves the edit target.
    #[error("no gamma in (0, {max}] makes token {token} the argmax")]
    GammaSearchFailed { token: usize, max: f64 },

    /// Covariance (or other) matrix is numerically singular.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: &'static str },

    /// Causal tracing was given an empty corruption span.
    #[error("empty subject span")]
    EmptySpan,

    /// Catch-all for invalid operation arguments.
    #[error("invalid argument: {reason}")]
    InvalidArgument { reason: String },

    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
