use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Rejected configuration, with the offending field in the message.
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] palmbridge_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format { path: path.into(), message: message.to_string() }
    }

    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use palmbridge_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Config(_)) => 2,
            Self::Core(E::Divergence { .. } | E::Numeric { .. }) => 3,
            _ => 1,
        }
    }
}
