use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension too small: {nx}x{ny} (need at least 4x4)")]
    DimensionTooSmall { nx: usize, ny: usize },

    #[error("grid spacing must be positive and finite, got dx={dx}, dy={dy}")]
    NonpositiveSpacing { dx: f64, dy: f64 },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("ensemble too small: {0} members (need at least 2)")]
    EnsembleTooSmall(usize),

    #[error("ensemble members disagree in block structure")]
    BlockMismatch,

    #[error("state dimension {0} too large to materialize a covariance")]
    StateTooLarge(usize),

    #[error("cell index ({0}, {1}) out of range")]
    IndexOutOfRange(usize, usize),

    #[error("negative entry in model state ({block} block, cell ({i}, {j}))")]
    NegativeState { block: &'static str, i: usize, j: usize },

    #[error("observation variance must be positive and finite, got {0}")]
    InvalidVariance(f64),

    #[error("observed block index {0} out of range")]
    InvalidBlock(usize),

    #[error("linear solve failed: matrix not positive definite")]
    LinearSolve,

    #[error("warp mapping is not invertible (Jacobian determinant {det} at cell ({i}, {j}))")]
    NotInvertible { det: f64, i: usize, j: usize },

    #[error("mapping inversion did not converge: defect {defect} exceeds tolerance {tolerance}")]
    InversionNotConverged { defect: f64, tolerance: f64 },

    #[error("ensemble has no reference member")]
    MissingReference,

    #[error("field has zero total mass; centroid undefined")]
    ZeroMass,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: String, reason: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionTooSmall { .. } => "dimension_too_small",
            Error::NonpositiveSpacing { .. } => "nonpositive_spacing",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyEnsemble => "empty_ensemble",
            Error::EnsembleTooSmall(_) => "ensemble_too_small",
            Error::BlockMismatch => "block_mismatch",
            Error::StateTooLarge(_) => "state_too_large",
            Error::IndexOutOfRange(..) => "index_out_of_range",
            Error::NegativeState { .. } => "negative_state",
            Error::InvalidVariance(_) => "invalid_variance",
            Error::InvalidBlock(_) => "invalid_block",
            Error::LinearSolve => "linear_solve",
            Error::NotInvertible { .. } => "not_invertible",
            Error::InversionNotConverged { .. } => "inversion_not_converged",
            Error::MissingReference => "missing_reference",
            Error::ZeroMass => "zero_mass",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
