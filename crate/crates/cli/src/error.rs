use serde_json::json;

/// Failure of a command, carrying its process exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Invalid configuration or checkpoint (exit 2).
    Config(String),
    /// Unreadable or insufficient input images (exit 3).
    Data(String),
    /// Training produced a non-finite loss (exit 4).
    NonFinite { term: String, step: Option<u64> },
    /// A self-check failed (exit 1).
    Check { name: String, value: f64, tolerance: f64 },
    /// Anything else, such as an unwritable output path (exit 1).
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::NonFinite { .. } => 4,
            CliError::Check { .. } | CliError::Failure(_) => 1,
        }
    }

    /// Machine-readable diagnostic written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config(m) => json!({ "error": "config", "message": m }),
            CliError::Data(m) => json!({ "error": "data", "message": m }),
            CliError::NonFinite { term, step } => json!({ "error": "non_finite", "term": term, "step": step }),
            CliError::Check { name, value, tolerance } => {
                json!({ "error": "selfcheck", "check": name, "value": value, "tolerance": tolerance })
            }
            CliError::Failure(m) => json!({ "error": "failure", "message": m }),
        }
    }

    /// Classifies a library error raised during training or inference.
    pub fn from_run(e: styleblend::Error) -> Self {
        match e {
            styleblend::Error::NonFinite { term, step } => CliError::NonFinite { term, step },
            other => CliError::Failure(other.to_string()),
        }
    }

    /// Classifies a library error raised while reading a checkpoint.
    pub fn from_checkpoint(e: styleblend::Error) -> Self {
        match e {
            styleblend::Error::Io(io) => CliError::Config(format!("cannot read checkpoint: {io}")),
            other => CliError::Config(format!("bad checkpoint: {other}")),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

impl std::error::Error for CliError {}
