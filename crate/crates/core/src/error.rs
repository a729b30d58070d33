use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("feature dim {dim} is not divisible by {heads} heads")]
    HeadsNotDivisible { dim: usize, heads: usize },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadMatrixData { rows: usize, cols: usize, len: usize },

    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("target {0} is not among the scored keys")]
    MissingTarget(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("gradient self-test failed: relative error {error:.3e} at {worst}")]
    GradientCheckFailed { error: f64, worst: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::HeadsNotDivisible { .. } => "heads_not_divisible",
            Error::BadMatrixData { .. } => "bad_matrix_data",
            Error::InvalidDropout(_) => "invalid_dropout",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownNode(_) => "unknown_node",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::MissingTarget(_) => "missing_target",
            Error::EmptyInput(_) => "empty_input",
            Error::GradientCheckFailed { .. } => "gradient_check_failed",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }
}
