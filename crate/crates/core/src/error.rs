use crate::config::ConfigError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("invalid model config: {0}")]
    Config(#[from] ConfigError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("non-finite value in loss term {term:?}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: String, step: Option<u64> },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
