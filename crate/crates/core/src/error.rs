use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("infeasible deployment: {0}")]
    InfeasibleDeployment(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid row at line {line}: {msg}")]
    InvalidRow { line: u64, msg: String },

    #[error("request {request} can never fit on an empty machine ({needed} tokens > {capacity})")]
    CapacityDeadlock {
        request: u64,
        needed: u64,
        capacity: u64,
    },

    #[error("no metrics to evaluate")]
    EmptyMetrics,

    #[error("no feasible point in the searched grid")]
    NoFeasiblePoint,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidSpec(msg.into())
    }

    pub(crate) fn infeasible(msg: impl Into<String>) -> Self {
        Error::InfeasibleDeployment(msg.into())
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
