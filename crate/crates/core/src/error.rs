//! Crate-wide error type.

use crate::pipeline::{Interaction, Stage};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violated a documented precondition (empty trace, negative
    /// weight, malformed distribution, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Mock or fixture backend has no entry for the requested key and no
    /// default text.
    #[error("missing backend key: sample `{sample_id}`, stage `{stage}`")]
    MissingKey { sample_id: String, stage: Stage },

    /// HTTP transport failure: connect error, timeout, non-2xx status, or a
    /// body that does not match the expected shape.
    #[error("backend transport error: {detail}")]
    Transport { detail: String, transient: bool },

    /// Expert reconstruction failed.
    #[error("expert reconstruction failed for `{image_ref}`: {detail}")]
    ExpertFailure { image_ref: String, detail: String },

    /// A pipeline stage failed after retries; carries the interactions
    /// recorded before the failure.
    #[error("stage {stage} failed for sample `{sample_id}`: {detail}")]
    StageFailure {
        sample_id: String,
        stage: Stage,
        detail: String,
        partial: Vec<Interaction>,
    },

    /// A JSONL line could not be parsed or failed schema validation.
    #[error("{path}:{line}: {detail}")]
    Schema {
        path: String,
        line: usize,
        detail: String,
    },

    /// A record category has no attribute-table entry and no geometry stats.
    #[error("unmapped category `{category}` for record `{id}` (no geometry stats)")]
    UnmappedCategory { id: String, category: String },

    /// Scoring input refers to a sample without a gold annotation.
    #[error("no gold annotation for sample `{sample_id}`")]
    MissingGold { sample_id: String },

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Whether a retry could plausibly succeed. Only transport-level
    /// failures marked transient (timeouts, 5xx, connect errors) qualify;
    /// missing keys and malformed bodies never do.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            Error::Transport {
                transient: true,
                ..
            }
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
