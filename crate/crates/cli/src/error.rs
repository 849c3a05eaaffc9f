use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit status for usage, input and validation errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when training produced a non-finite loss.
pub const EXIT_TRAINING: i32 = 3;
/// Exit status when a corpus, checkpoint or descriptor disagree.
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {message}", path.display())]
    Path { path: PathBuf, message: String },

    #[error("{0}")]
    Server(String),

    #[error(transparent)]
    Core(#[from] spinterp::Error),
}

impl CliError {
    pub fn missing(path: impl Into<PathBuf>) -> Self {
        CliError::Path {
            path: path.into(),
            message: "no such file or directory".into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Path {
            path: path.into(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(spinterp::Error::NonFinite { .. }) => EXIT_TRAINING,
            CliError::Core(spinterp::Error::DescriptorMismatch { .. }) => EXIT_MISMATCH,
            _ => EXIT_USAGE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Path { .. } => "path",
            CliError::Server(_) => "server",
            CliError::Core(e) => match e {
                spinterp::Error::NonFinite { .. } => "non_finite",
                spinterp::Error::DescriptorMismatch { .. } => "descriptor_mismatch",
                spinterp::Error::File { .. } | spinterp::Error::Io(_) => "path",
                spinterp::Error::Parse { .. } | spinterp::Error::Json(_) => "parse",
                spinterp::Error::InsufficientData(_) => "insufficient_data",
                _ => "invalid_input",
            },
        }
    }

    /// The single-line report written to stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}
