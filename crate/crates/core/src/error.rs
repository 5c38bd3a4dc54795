use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported npy content: {0}")]
    Unsupported(String),

    #[error("corrupt npy payload: {0}")]
    Corrupt(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate mask: coverage {coverage} selects less than one pixel of {h}x{w}")]
    DegenerateMask { coverage: f64, h: usize, w: usize },

    #[error("region selects no pixels")]
    EmptyRegion,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend server error (status {status}): {message}")]
    Server { status: u16, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown sweep parameter {0:?}")]
    UnknownParameter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
