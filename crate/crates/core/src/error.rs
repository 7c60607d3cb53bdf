use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or settings that do not fit together (dimension mismatch, bad config).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller passed an argument outside the operation's domain.
    #[error("usage error: {0}")]
    Usage(String),

    /// Operation called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error(
        "training diverged at iteration {iteration}: non-finite {what} in layer {layer} \
         (coordinate {index}, value {value})"
    )]
    Diverged {
        iteration: usize,
        what: &'static str,
        layer: usize,
        index: usize,
        value: f64,
    },

    #[error("storage exhausted: {0}")]
    Storage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
