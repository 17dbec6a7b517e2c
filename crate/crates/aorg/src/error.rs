use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Solver,
    Acceptance,
    Io,
}

/// Error surfaced by the command line, mapped onto an exit status.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{kind:?} error: {message}")]
pub struct AppError {
    pub kind: ErrorKind,
    pub message: String,
}

impl AppError {
    pub fn config(message: impl Into<String>) -> Self {
        AppError { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn solver(message: impl Into<String>) -> Self {
        AppError { kind: ErrorKind::Solver, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        AppError { kind: ErrorKind::Io, message: message.into() }
    }

    pub fn acceptance(message: impl Into<String>) -> Self {
        AppError { kind: ErrorKind::Acceptance, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config | ErrorKind::Io => 2,
            ErrorKind::Solver => 3,
            ErrorKind::Acceptance => 4,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message, "exit_code": self.exit_code() }).to_string()
    }
}

impl From<aorg_core::Error> for AppError {
    fn from(e: aorg_core::Error) -> Self {
        use aorg_core::Error as E;
        match e {
            E::TimingViolation { .. } | E::DimensionMismatch(_) | E::InvalidProbability(_) | E::NotSchur { .. } => {
                AppError::config(e.to_string())
            }
            _ => AppError::solver(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::io(e.to_string())
    }
}
