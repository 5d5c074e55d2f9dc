use thiserror::Error;

/// Errors produced by the decomposition engine and its front ends.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A weighted regression step collapsed (zero denominator), so the
    /// rank-one fit cannot continue.
    #[error("degenerate rank-one fit{}", match component { Some(c) => format!(" at component {c}"), None => String::new() })]
    DegenerateFit { component: Option<usize> },

    #[error("block {block} ({name}): {source}")]
    Block {
        block: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_block(self, block: usize, name: &str) -> Self {
        Error::Block {
            block,
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
