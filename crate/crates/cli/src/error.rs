use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },

    #[error("config syntax error (line {line}): {message}")]
    Syntax { line: usize, message: String },

    #[error("unknown experiment `{name}`; registered: {}", registered.join(", "))]
    UnknownExperiment { name: String, registered: Vec<String> },

    #[error("config is missing the `experiment` key")]
    MissingExperiment,

    #[error("unknown config keys: {}; valid keys: {}", keys.join(", "), valid.join(", "))]
    UnknownKeys { keys: Vec<String>, valid: Vec<String> },

    #[error("invalid config values: {}", errors.iter().map(|(k, e)| format!("{k}: {e}")).collect::<Vec<_>>().join("; "))]
    InvalidValues { errors: Vec<(String, String)> },

    #[error(transparent)]
    Core(#[from] bilevel_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Syntax { .. } => "syntax",
            Self::UnknownExperiment { .. } => "unknown_experiment",
            Self::MissingExperiment => "missing_experiment",
            Self::UnknownKeys { .. } => "unknown_keys",
            Self::InvalidValues { .. } => "invalid_values",
            Self::Core(_) => "experiment_failure",
        }
    }

    /// Configuration problems exit with 2, failures while running with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(_) | Self::Io { .. } => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            Self::UnknownExperiment { registered, .. } => v["registered"] = json!(registered),
            Self::UnknownKeys { keys, valid } => {
                v["keys"] = json!(keys);
                v["valid"] = json!(valid);
            }
            Self::InvalidValues { errors } => {
                v["keys"] = json!(errors.iter().map(|(k, _)| k).collect::<Vec<_>>());
            }
            _ => {}
        }
        v
    }
}
