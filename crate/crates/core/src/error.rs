use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: shapes, hyperparameters, unknown keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (empty corpus, out-of-range token, bad sparsity...).
    #[error("input error: {0}")]
    Input(String),

    /// Operation called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Misuse of the differentiation graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training diverged or otherwise failed.
    #[error("training error: {0}")]
    Training(String),

    #[error("corpus generation error: {0}")]
    Generation(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than by a run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
