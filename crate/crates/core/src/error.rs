use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A patch or stride does not fit the image along `dimension`.
    #[error("invalid geometry ({dimension}): {message}")]
    Geometry {
        dimension: &'static str,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("cannot form {k} clusters from {distinct} distinct aspect ratios")]
    InfeasibleK { k: usize, distinct: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("overlapping patch grid: stride {stride} < patch {patch} along {dimension}")]
    OverlappingGrid {
        dimension: &'static str,
        stride: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty evaluation: no query has a valid gallery match")]
    EmptyEvaluation,

    #[error("format error: {0}")]
    Format(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geometry { .. } => "invalid_geometry",
            Error::EmptyDataset => "empty_dataset",
            Error::InfeasibleK { .. } => "infeasible_k",
            Error::InvalidConfig(_) => "invalid_config",
            Error::OverlappingGrid { .. } => "overlapping_grid",
            Error::Shape(_) => "shape",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::EmptyInput(_) => "empty_input",
            Error::EmptyEvaluation => "empty_evaluation",
            Error::Format(_) => "format",
            Error::Manifest { .. } => "manifest",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn geometry(dimension: &'static str, message: impl Into<String>) -> Self {
        Error::Geometry {
            dimension,
            message: message.into(),
        }
    }
}
