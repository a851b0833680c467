//! Command failures with exit codes and a machine-readable record.

use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot load {path}: {reason}")]
    Load { path: String, reason: String },
    #[error(transparent)]
    Core(#[from] gencond::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("plot: {0}")]
    Plot(String),
}

#[derive(Serialize)]
struct Record<'a> {
    error: Body<'a>,
}

#[derive(Serialize)]
struct Body<'a> {
    kind: &'a str,
    exit_code: i32,
    message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn load(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Load {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Load { .. } => "load",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::Plot(_) => "plot",
        }
    }

    /// 2 for bad invocations or configs, 3 for unreadable inputs, 4 for
    /// numerical divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" | "config" | "argument" => 2,
            "load" | "integrity" | "checkpoint" => 3,
            "divergence" => 4,
            _ => 1,
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> String {
        serde_json::to_string(&Record {
            error: Body {
                kind: self.kind(),
                exit_code: self.exit_code(),
                message: self.to_string(),
            },
        })
        .expect("error record serializes")
    }
}
