use std::io;
use std::path::{Path, PathBuf};

use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Input rejected by validation; the exit code carries the error count.
    #[error("{message}")]
    Rejected {
        message: String,
        errors: usize,
        detail: Json,
    },
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot reach {url}: {message}")]
    Unreachable { url: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Failed(_) => 1,
            CliError::Rejected { errors, .. } => (*errors).clamp(1, 125) as u8,
            CliError::Io { .. } => 126,
            CliError::Unreachable { .. } => 127,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Builds a rejection from a `{violations}` or `{diagnostics}` detail
    /// object, counting error-level entries.
    pub fn rejected(message: impl Into<String>, detail: Json) -> Self {
        let message = message.into();
        if let Some(violations) = detail.get("violations").and_then(Json::as_array) {
            let errors = violations.iter().filter(|v| v["severity"] == "error").count();
            let mut lines = vec![message];
            lines.extend(violations.iter().map(describe_violation));
            return CliError::Rejected {
                message: lines.join("\n"),
                errors,
                detail,
            };
        }
        if let Some(diags) = detail.get("diagnostics").and_then(Json::as_array) {
            let mut lines = vec![message];
            lines.extend(diags.iter().map(|d| {
                format!(
                    "  {} at {}: {}",
                    d["code"].as_str().unwrap_or("?"),
                    d["location"].as_str().unwrap_or("?"),
                    d["message"].as_str().unwrap_or("")
                )
            }));
            return CliError::Rejected {
                message: lines.join("\n"),
                errors: diags.len(),
                detail,
            };
        }
        CliError::Failed(message)
    }
}

fn describe_violation(v: &Json) -> String {
    let mut line = format!(
        "  {} {}",
        v["severity"].as_str().unwrap_or("?"),
        v["rule_id"].as_str().unwrap_or("?")
    );
    if let (Some(u), Some(t)) = (v["unit"].as_str(), v["target"].as_str()) {
        line.push_str(&format!(" [{u} / {t}"));
        if let Some(c) = v["class"].as_str() {
            line.push_str(&format!(" / {c}"));
        }
        line.push(']');
    }
    line.push_str(&format!(": {}", v["message"].as_str().unwrap_or("")));
    line
}
