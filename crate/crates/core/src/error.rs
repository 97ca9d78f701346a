use std::path::PathBuf;

/// Errors raised anywhere in the composition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("concept `{concept}` not found as a token span in prompt `{prompt}`")]
    SpanNotFound { concept: String, prompt: String },

    #[error("prompt needs {len} tokens, tokenizer limit is {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("invalid composition spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("adapter mismatch: {0}")]
    AdapterMismatch(String),

    #[error("unsupported adapter format: {0}")]
    UnsupportedFormat(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("schedule exhausted at step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("concept group `{0}` has no members")]
    EmptyGroup(String),

    #[error("no attention records at {h}x{w}")]
    ResolutionUnavailable { h: usize, w: usize },

    #[error("attention map is all zero")]
    DegenerateMap,

    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
