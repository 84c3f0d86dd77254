use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HamError {
    /// Two parameter sets that must share names, order and shapes do not.
    #[error("parameter sets are not congruent at layer `{layer}`: {detail}")]
    Congruence { layer: String, detail: String },

    /// A flat vector, mask or tensor whose metadata disagrees with its data.
    #[error("structural error: {0}")]
    Structural(String),

    /// An operation was called outside its domain (empty input and the like).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("numerical failure at step {step}, source {source_id}: {detail}")]
    Numerical {
        step: usize,
        source_id: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HamError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        HamError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: 2 config/validation,
    /// 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HamError::Numerical { .. } => 3,
            HamError::Io { .. } => 4,
            _ => 2,
        }
    }
}
