use std::fmt;

use serde_json::json;

/// Failure reported by the binary: one JSON line on stderr plus an exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Runtime => "runtime",
        }
    }
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        json!({
            "error": self.kind.name(),
            "exit_code": self.kind.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tabtoken::Error> for CliError {
    fn from(e: tabtoken::Error) -> Self {
        use tabtoken::Error as E;
        let kind = match &e {
            E::Config(_) | E::InvalidArgument(_) => ErrorKind::Config,
            E::Data(_) | E::Schema(_) | E::Io { .. } | E::Csv(_) | E::Json(_) => ErrorKind::Data,
            E::Numeric(_) | E::Contract(_) => ErrorKind::Runtime,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
