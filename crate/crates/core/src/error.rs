use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset has no images for concept ({style}, {shape})")]
    MissingConcept { style: String, shape: String },

    #[error("zero-norm vector in cosine similarity ({0})")]
    ZeroNorm(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("quality gate failed: {0}")]
    GateFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to overwrite existing run directory {0} (use --force)")]
    RunDirExists(PathBuf),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::InvalidArgument(_) | LabError::UnknownToken(_) => 2,
            LabError::GateFailed(_) => 3,
            LabError::Numerical(_) | LabError::ZeroNorm(_) => 4,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}
