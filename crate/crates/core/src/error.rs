use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("distributions have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty mask: no positions contribute to the loss")]
    EmptyMask,

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("degenerate profile: no layer lies strictly below the median")]
    DegenerateProfile,

    #[error("id mismatch between paired inputs: {0}")]
    IdMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config hash mismatch for {stage}: recorded {recorded}, current {current}")]
    ConfigMismatch {
        stage: String,
        recorded: String,
        current: String,
    },

    #[error("{0}")]
    Analysis(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
