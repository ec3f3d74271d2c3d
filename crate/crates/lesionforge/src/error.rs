//! Error taxonomy shared by the whole stack.
//!
//! `Numeric` is the only class that maps to a distinct process exit code (2);
//! everything else is a usage/contract failure (1).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape mismatch; the message names the offending axes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf detected, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk container or checkpoint.
    #[error("format error: {0}")]
    Format(String),

    /// Manifest/prediction file violates the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A stratified split cannot serve every class.
    #[error("split error: {0}")]
    Split(String),

    /// Batch statistics are undefined (fewer than two elements per channel).
    #[error("degenerate-batch error: {0}")]
    DegenerateBatch(String),

    #[error("io error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: numeric failures are distinguishable from misuse.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }

    /// Stable machine-parsable prefix, e.g. `error[numeric]`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Schema(_) => "schema",
            Error::Split(_) => "split",
            Error::DegenerateBatch(_) => "degenerate-batch",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
