use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{what} not found: {}", path.display())]
    MissingFile { what: &'static str, path: PathBuf },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    Checkpoint(String),
    #[error("{what} id {id} outside vocabulary of {bound}")]
    UnknownId { what: &'static str, id: i64, bound: usize },
    #[error(transparent)]
    Model(#[from] nadex_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingFile { .. } | CliError::Parse { .. } => 2,
            CliError::Model(nadex_core::Error::Config(_)) => 2,
            CliError::Version { .. } | CliError::Checkpoint(_) => 3,
            CliError::UnknownId { .. } => 4,
            CliError::Io { .. } | CliError::Model(_) => 1,
        }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Model(nadex_core::Error::Config(_)) => "config",
            CliError::MissingFile { .. } => "missing-file",
            CliError::Parse { .. } => "parse",
            CliError::Io { .. } => "io",
            CliError::Version { .. } => "version",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::UnknownId { .. } => "unknown-id",
            CliError::Model(nadex_core::Error::NonFinite(_)) => "nan",
            CliError::Model(nadex_core::Error::Empty(_)) => "empty",
            CliError::Model(_) => "model",
        }
    }

    /// `error[category]: message` on a single line.
    pub fn report_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.category(), msg)
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_and_lines() {
        let e = CliError::MissingFile {
            what: "train split",
            path: "data/train.txt".into(),
        };
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.report_line(), "error[missing-file]: train split not found: data/train.txt");
        assert_eq!(CliError::Version { found: 9, expected: 1 }.exit_code(), 3);
        let u = CliError::UnknownId {
            what: "entity",
            id: 99,
            bound: 5,
        };
        assert_eq!(u.exit_code(), 4);
        let nan = CliError::Model(nadex_core::Error::NonFinite("total loss\nat t".into()));
        assert_eq!(nan.report_line(), "error[nan]: non-finite value in total loss at t");
        assert_eq!(CliError::Model(nadex_core::Error::Config("x".into())).exit_code(), 2);
    }
}
