use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("inverted element: deformation gradient has determinant {det:.6e}")]
    InvertedElement { det: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("newton solver did not converge after {iterations} iterations (last residual {residual:.3e}, load factor {load_factor})")]
    Divergence {
        iterations: usize,
        residual: f64,
        load_factor: f64,
    },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("perturbation solve failed for component ({i},{j}): {source}")]
    PerturbationFailed {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("macro solve failed at load step {step}: {source}")]
    MacroStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("snapshot generation failed at point {index} (params {params:?}): {source}")]
    SnapshotFailed {
        index: usize,
        params: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("ill-conditioned regression inputs: {0}")]
    IllConditioned(String),

    #[error("hyperparameter fit failed: {0}")]
    FitFailed(String),

    #[error("unsupported sobol dimension {0} (max 21)")]
    UnsupportedDimension(usize),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("mesh hash mismatch: expected {expected}, found {found}")]
    MeshMismatch { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
