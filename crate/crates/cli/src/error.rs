use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A scenario or argument failed validation; `field` names the offending entry.
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Core(#[from] cfgdist_core::Error),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Invalid { field: field.into(), message: message.to_string() }
    }

    /// 2 for validation failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid { .. } | CliError::Parse { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attach a scenario field to a core error.
pub(crate) trait Context<T> {
    fn field(self, field: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for cfgdist_core::Result<T> {
    fn field(self, field: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| CliError::invalid(field(), e))
    }
}
