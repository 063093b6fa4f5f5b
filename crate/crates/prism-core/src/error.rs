//! Error taxonomy shared across the engine.

use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-domain input (non-finite numbers, schema mismatches).
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation was refused because the problem size exceeds a guard.
    #[error("size guard: {0}")]
    Size(String),

    /// An oracle query failed after retries; carries what we know about it.
    #[error("oracle query failed ({context}): {message}")]
    Query { context: String, message: String },

    /// The oracle answered, but the answer could not be parsed.
    #[error("parse error: {message}; raw text: {raw_text:?}")]
    Parse { message: String, raw_text: String },

    /// A parsed value fell outside its legal range.
    #[error("value out of range: {0}")]
    Range(String),

    /// The oracle violated a structural contract (wrong row count, wrong class count).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// HTTP-level failure talking to a live oracle.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Task configuration is inconsistent or incomplete.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion failure, naming the offending location.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A metric is undefined on the given data (e.g. single-class input).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Lookup of a run, instance, or fixture entry failed.
    #[error("not found: {0}")]
    NotFound(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn query(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Query {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Error::Parse {
            message: message.into(),
            raw_text: raw_text.into(),
        }
    }

    /// True when the error indicates an oracle/transport failure, as opposed to
    /// bad local input. Run orchestration uses this to charge the failure budget.
    pub fn is_oracle_failure(&self) -> bool {
        matches!(
            self,
            Error::Query { .. } | Error::Parse { .. } | Error::Transport { .. } | Error::Protocol(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
