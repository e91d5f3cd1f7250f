use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("need at least 4 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("keypoints {0} and {1} coincide")]
    CoincidentKeypoints(usize, usize),
    #[error("rotation is not orthonormal (|RᵀR - I| = {orthogonality:e}, det = {determinant})")]
    InvalidRotation { orthogonality: f64, determinant: f64 },
    #[error("scales must be positive and finite, got {0:?}")]
    InvalidScale([f64; 3]),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("invalid bin index {index} (num_bins = {num_bins})")]
    InvalidBin { index: i64, num_bins: usize },
    #[error("invalid shape parameters: {0}")]
    InvalidParams(String),
    #[error("no pixel of the object survives in this view")]
    EmptyView,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step} (samples {samples:?})")]
    NonFiniteLoss { step: usize, samples: Vec<usize> },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no model with at least {min_sample} inliers (best {best})")]
    NoModel { best: usize, min_sample: usize },

    #[error("no evaluation records")]
    EmptyEval,

    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for command-line use: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::EmptyInput(_)
            | Error::TooFewKeypoints(_)
            | Error::CoincidentKeypoints(..)
            | Error::DimensionMismatch { .. }
            | Error::InvalidBin { .. }
            | Error::InvalidParams(_)
            | Error::EmptyView
            | Error::ShapeMismatch(_)
            | Error::EmptyEval
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::NonFinite(_)
            | Error::InvalidRotation { .. }
            | Error::InvalidScale(_)
            | Error::SingularSystem(_)
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateConfiguration(_)
            | Error::NoModel { .. } => 4,
        }
    }
}
