use std::path::Path;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] c2f_core::Error),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    /// The command ran but its check did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 configuration, 3 data, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use c2f_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::Data(_) | E::Checkpoint(_) | E::Contract(_) | E::Io { .. }) => 3,
            CliError::Core(E::Numeric(_)) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(c2f_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}
