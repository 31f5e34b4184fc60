use serde::Serialize;

/// Failure reported to stderr as a single JSON object.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub exit_code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config".into(), message: message.into(), exit_code: 2 }
    }

    pub fn incompatible(a: impl std::fmt::Display, b: impl std::fmt::Display) -> Self {
        Self::config(format!("{a} is incompatible with {b}"))
    }

    pub fn missing(what: impl std::fmt::Display) -> Self {
        Self { kind: "missing_input".into(), message: format!("{what} not found; run the producing command first"), exit_code: 3 }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<unida::Error> for CliError {
    fn from(e: unida::Error) -> Self {
        Self { kind: e.kind().into(), message: e.to_string(), exit_code: 1 }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: "io".into(), message: e.to_string(), exit_code: 1 }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: "json".into(), message: e.to_string(), exit_code: 1 }
    }
}

pub type CliResult<T> = Result<T, CliError>;
