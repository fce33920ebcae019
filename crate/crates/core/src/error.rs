use std::path::PathBuf;

/// Errors produced by every stage of the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum VceError {
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest at {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}`: blob file `{file}` is missing")]
    MissingBlob { name: String, file: String },

    #[error("tensor `{name}`: sha256 mismatch")]
    HashMismatch { name: String },

    #[error("tensor `{name}`: {reason}")]
    Inconsistent { name: String, reason: String },

    #[error("tensor `{0}` not found")]
    MissingTensor(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("rank {k} out of range 1..={max}")]
    Rank { k: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no hallucination subspace for layer {0}")]
    MissingLayer(usize),

    #[error("edit target `{0}` not found")]
    TargetNotFound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("bundle validation failed: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VceError>,
    },
}

pub type Result<T> = std::result::Result<T, VceError>;

impl VceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &VceError {
        match self {
            VceError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
