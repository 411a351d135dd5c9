use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("rerun did not reproduce: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<termembed::Error> for CliError {
    fn from(e: termembed::Error) -> Self {
        use termembed::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::InvalidInput(_) | E::Undefined(_) => CliError::Config(e.to_string()),
            E::Numerical(m) => CliError::Numerical(m),
            E::Io(_) | E::Json(_) | E::Parse { .. } | E::CorruptData(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
