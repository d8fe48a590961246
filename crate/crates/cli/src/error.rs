use serde::Serialize;

/// Failure classes the process exit code distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Bad configuration, bad arguments or missing inputs: exit code 2.
    Config,
    /// Anything that went wrong while running: exit code 1.
    Runtime,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Runtime => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "code": self.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl From<lgd_core::Error> for CliError {
    fn from(e: lgd_core::Error) -> Self {
        match e {
            lgd_core::Error::Config(_) => Self::config(e.to_string()),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(format!("JSON error: {e}"))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
