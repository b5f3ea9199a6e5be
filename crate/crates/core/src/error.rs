//! Error type shared by every module in the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    /// A layer range is empty or falls outside the tensor.
    #[error("invalid layer range: {0}")]
    InvalidRange(String),

    /// Matrix/vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative numerical routine failed to converge or produced
    /// non-finite values.
    #[error("numerical failure: {0}")]
    NumericalError(String),

    /// A latent vector has (near-)zero norm, so angular distance is
    /// undefined.
    #[error("degenerate latent vector (norm below 1e-12)")]
    DegenerateLatent,

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}")]
    DivergenceError { step: usize },

    /// A holdout split has too few rows/pairs to evaluate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Rank correlation of a constant vector.
    #[error("undefined correlation: zero rank variance")]
    UndefinedCorrelation,

    /// A metric's denominator is degenerate (single class, zero variance, ...).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A paired test with no usable pairs.
    #[error("undefined test: {0}")]
    UndefinedTest(String),

    /// A supervised task with fewer than two classes.
    #[error("undefined task: {0}")]
    UndefinedTask(String),

    /// Point cloud too degenerate for a geometric audit.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Lens axis collapsed below usable norm.
    #[error("degenerate axis: norm below 1e-10")]
    DegenerateAxis,

    /// A benchmark unit that must be recorded as invalid rather than crash.
    #[error("invalid run: {0}")]
    InvalidRun(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Container / CSV / header parse failure.
    #[error("format error: {0}")]
    FormatError(String),
}

pub type Result<T> = std::result::Result<T, ForgeError>;
