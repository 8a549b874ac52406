use std::path::{Path, PathBuf};

/// Everything the file formats and commands can fail with. Each variant maps
/// to its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] evcap_core::Error),
    #[error("missing artifact {}: {what}", path.display())]
    MissingArtifact { path: PathBuf, what: String },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use evcap_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Parse { .. } => 4,
            CliError::Checkpoint { .. } => 5,
            CliError::Io { .. } => 6,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::Numeric(_) => 7,
                E::Leakage(_) => 8,
                E::Schema(_) | E::Dimension(_) => 9,
                E::Config(_) | E::Parameter(_) | E::Validation(_) | E::Pairing(_) => 10,
            },
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return CliError::MissingArtifact { path: path.to_path_buf(), what: "file not found".into() };
        }
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn parse(path: &Path, line: u64, msg: impl Into<String>) -> Self {
        CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
    }

    pub(crate) fn checkpoint(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
    }
}
