use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error type. The CLI maps variants to exit codes: config
/// problems exit 2, stage failures exit 3, endpoint failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate example id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("endpoint {url}: {message}")]
    Endpoint { url: String, message: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("stage {stage} failed: {message}\nresume: fix the cause and re-run; completed stages are picked up from {out_dir}")]
    Stage {
        stage: String,
        message: String,
        out_dir: PathBuf,
    },

    #[error("{0}")]
    Domain(String),

    #[error("prompt layout: {0}")]
    Prompt(String),

    #[error("masking did not eliminate {answer:?} within {passes} passes")]
    MaskBudget { answer: String, passes: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Exit code for the CLI: 2 config, 3 stage, 4 endpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Stage { .. } => 3,
            Error::Endpoint { .. } => 4,
            _ => 1,
        }
    }
}
