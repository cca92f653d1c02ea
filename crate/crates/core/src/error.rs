use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("manifest schema violation: {0}")]
    Schema(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("inconsistent {what} length at frame {frame}")]
    InconsistentLength { what: &'static str, frame: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("out-of-bounds patch: {0}")]
    OutOfBounds(String),

    #[error("non-finite parameters in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("editor timed out after {attempts} attempts: {message}")]
    EditorTimeout { attempts: usize, message: String },

    #[error("editor returned status {status}: {message}")]
    EditorStatus { status: u16, message: String },

    #[error("editor transport error: {0}")]
    EditorTransport(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("pipeline stage `{stage}` failed in cycle {cycle}: {source}")]
    Stage {
        stage: &'static str,
        cycle: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
