use std::path::PathBuf;

use phdiff_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("step underflow: cannot denoise below t=0")]
    StepUnderflow,
    #[error("numeric divergence at step {step}: {detail}")]
    NumericDivergence { step: usize, detail: String },
    #[error("non-finite {component} loss")]
    NonFinite { component: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
    #[error("constraint violated: foreground ratio {ratio:.4} outside [{min}, {max}]")]
    AreaRatio { ratio: f64, min: f64, max: f64 },
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config fingerprint mismatch: file has {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("records: {0}")]
    Records(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Singularity(_) => "singularity",
            Error::StepUnderflow => "step_underflow",
            Error::NumericDivergence { .. } => "numeric_divergence",
            Error::NonFinite { .. } => "non_finite",
            Error::Validation(_) => "validation",
            Error::Index(_) => "index",
            Error::Alignment(_) => "alignment",
            Error::DegenerateRegion(_) => "degenerate_region",
            Error::AreaRatio { .. } => "area_ratio",
            Error::State(_) => "state",
            Error::Checkpoint(_) => "checkpoint",
            Error::Fingerprint { .. } => "fingerprint",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Records(_) => "records",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
