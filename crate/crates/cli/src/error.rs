use std::io::Write;
use std::process::ExitCode;

use serde::Serialize;
use trajagg_core::evalkit::EvalError;
use trajagg_core::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable inputs or invalid configuration (exit 2).
    #[error("{kind}: {detail}")]
    Usage { kind: &'static str, detail: String },
    /// A check ran and failed (exit 1).
    #[error("{kind}: {detail}")]
    Check { kind: &'static str, detail: String },
    /// Interrupted after flushing completed work (exit 130).
    #[error("interrupted")]
    Interrupted,
}

impl CliError {
    pub fn usage(kind: &'static str, detail: impl ToString) -> Self {
        CliError::Usage {
            kind,
            detail: detail.to_string(),
        }
    }

    pub fn check(kind: &'static str, detail: impl ToString) -> Self {
        CliError::Check {
            kind,
            detail: detail.to_string(),
        }
    }

    pub fn report(&self) -> ExitCode {
        let (kind, detail, code) = match self {
            CliError::Usage { kind, detail } => (*kind, detail.as_str(), 2),
            CliError::Check { kind, detail } => (*kind, detail.as_str(), 1),
            CliError::Interrupted => ("Interrupted", "stopped after flushing completed records", 130),
        };
        let line = serde_json::json!({"error": kind, "detail": detail});
        eprintln!("{line}");
        ExitCode::from(code)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage("SchemaError", e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Io { .. } => "IoError",
            EvalError::Schema(_) => "SchemaError",
            EvalError::Pairing(_) => "PairingError",
            EvalError::Stats(_) => "StatsError",
        };
        CliError::usage(kind, e)
    }
}

/// Writes one JSON document to stdout.
pub fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string(value).map_err(|e| CliError::usage("SerializeError", e))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| CliError::usage("IoError", e))
}
