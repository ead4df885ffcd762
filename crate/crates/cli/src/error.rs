use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_STATISTICAL: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error: {0}")]
    Io(String),

    #[error("config error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error("model {}: {source}", path.display())]
    Model { path: PathBuf, source: qndsim::Error },

    #[error(transparent)]
    Core(#[from] qndsim::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Exit status for an error from the core library.
pub fn core_exit_code(e: &qndsim::Error) -> i32 {
    use qndsim::Error as E;
    if e.is_numerical_guard() {
        return EXIT_NUMERICAL;
    }
    match e {
        E::Io(_) => EXIT_IO,
        E::Parse { .. }
        | E::Schema(_)
        | E::InvalidModel(_)
        | E::DimensionMismatch { .. }
        | E::Diagonality(_)
        | E::NoExtinctionChannels { .. } => EXIT_CONFIG,
        E::TooManyUnresolved { .. } | E::EmptyCell { .. } => EXIT_STATISTICAL,
        _ => EXIT_INTERNAL,
    }
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            line: None,
            message: message.into(),
        }
    }

    pub fn config_at(line: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Config {
            line,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Config { .. } | CliError::Model { .. } => EXIT_CONFIG,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}
