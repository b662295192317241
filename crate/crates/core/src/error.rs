use thiserror::Error;

/// Errors raised by the stain pipeline.
#[derive(Debug, Error)]
pub enum CasaError {
    #[error("not enough tissue pixels: found {found}, need at least {required}")]
    NoTissue { found: usize, required: usize },
    #[error("degenerate stain estimate: {0}")]
    DegenerateStains(String),
    #[error("singular normal equations (det = {0:e})")]
    SingularSystem(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid stain matrix: {0}")]
    InvalidStainMatrix(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("mean stain column has norm {0:e}")]
    DegenerateMean(f64),
    #[error("concentration map is empty")]
    EmptyMap,
    #[error("beta must lie in (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("probability out of range: {name} = {value}")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("perturbed stain column has vanishing norm {0:e}")]
    NullColumn(f64),
    #[error("cap projection undefined for antipodal vector (angle {0})")]
    Antipodal(f64),
    #[error("evaluation group (center {center}, label {label}) is empty")]
    EmptyGroup { center: u32, label: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] ::image::ImageError),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CasaError {
    /// True for failures caused by the content of the data rather than by
    /// usage or I/O.
    pub fn is_data_error(&self) -> bool {
        !self.is_io_error()
    }

    /// True for filesystem, codec and serialization failures.
    pub fn is_io_error(&self) -> bool {
        matches!(self, CasaError::Io(_) | CasaError::Codec(_) | CasaError::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, CasaError>;
