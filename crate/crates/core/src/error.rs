use thiserror::Error;

/// Errors raised across the identification and fusion pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular covariance sum: {0}")]
    Singular(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty band: no FFT lines in [{f_lb}, {f_ub}] Hz")]
    EmptyBand { f_lb: f64, f_ub: f64 },

    #[error("band has {n_f} lines, at least {min} are required for identification")]
    TooFewLines { n_f: usize, min: usize },

    #[error("optimizer did not converge after {iterations} iterations (last objective {objective})")]
    NotConverged { iterations: usize, objective: f64 },

    /// Hessian is not positive definite; carries the offending eigenvalue and
    /// eigen-direction in the coordinates the Hessian was computed in.
    #[error("Hessian not positive definite (eigenvalue {eigenvalue:e})")]
    IndefiniteHessian {
        eigenvalue: f64,
        direction: Vec<f64>,
    },

    #[error("mode shapes are nearly orthogonal (|cos| = {cosine:.3}) for dataset {dataset}")]
    ModeMismatch { dataset: String, cosine: f64 },

    #[error("degenerate tempering stage: every sample has zero likelihood")]
    DegenerateStage,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            message: e.to_string(),
        }
    }
}
