use std::fmt;
use std::process::ExitCode;

use persona_probe::Error;
use serde_json::json;

/// A command failure with its exit status and machine-readable code.
#[derive(Debug)]
pub struct Failure {
    pub exit: u8,
    pub code: String,
    pub message: String,
}

impl Failure {
    pub fn usage(code: &str, message: impl Into<String>) -> Self {
        Failure {
            exit: 2,
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn runtime(code: &str, message: impl Into<String>) -> Self {
        Failure {
            exit: 1,
            code: code.into(),
            message: message.into(),
        }
    }

    /// The single stderr line: `{"error":{"code":...,"message":...}}`.
    pub fn json_line(&self) -> String {
        json!({"error": {"code": self.code, "message": self.message}}).to_string()
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.exit)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::AlphaOutOfRange { .. } => 2,
            _ => 1,
        };
        Failure {
            exit,
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime("IO_ERROR", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::runtime("JSON_ERROR", e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
