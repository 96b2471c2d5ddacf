use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("missing items: {}", .0.join(", "))]
    MissingItems(Vec<String>),

    #[error("duplicate response for item `{0}`")]
    DuplicateItem(String),

    #[error("invalid Likert level {0} (expected 1..=5)")]
    InvalidLikert(u8),

    #[error("response does not start with a Likert label: {0:?}")]
    Format(String),

    #[error("response has a Likert label but no explanation")]
    EmptyExplanation,

    #[error("profile for `{character}` is incomplete, failing items: {}", .items.join(", "))]
    IncompleteProfile { character: String, items: Vec<String> },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("generation produced no tokens")]
    EmptyGeneration,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("empty input")]
    EmptyInput,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("zero-length direction vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty class: {0}")]
    EmptyClass(&'static str),

    #[error("alpha {alpha} exceeds the allowed magnitude {limit}")]
    AlphaOutOfRange { alpha: f64, limit: f64 },

    #[error("model mismatch: directions for `{directions}`, backend is `{backend}`")]
    ModelMismatch { directions: String, backend: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI error lines and HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownItem(_) => "UNKNOWN_ITEM",
            Error::MissingItems(_) => "MISSING_ITEMS",
            Error::DuplicateItem(_) => "DUPLICATE_ITEM",
            Error::InvalidLikert(_) => "INVALID_LIKERT",
            Error::Format(_) => "FORMAT_ERROR",
            Error::EmptyExplanation => "EMPTY_EXPLANATION",
            Error::IncompleteProfile { .. } => "INCOMPLETE_PROFILE",
            Error::Provider(_) => "PROVIDER_ERROR",
            Error::Backend(_) => "BACKEND_ERROR",
            Error::EmptyGeneration => "EMPTY_GENERATION",
            Error::SchemaMismatch(_) => "SCHEMA_MISMATCH",
            Error::CorruptPayload(_) => "CORRUPT_PAYLOAD",
            Error::EmptyInput => "EMPTY_INPUT",
            Error::DegenerateInput(_) => "DEGENERATE_INPUT",
            Error::ZeroVector => "ZERO_VECTOR",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::EmptyClass(_) => "EMPTY_CLASS",
            Error::AlphaOutOfRange { .. } => "ALPHA_OUT_OF_RANGE",
            Error::ModelMismatch { .. } => "MODEL_MISMATCH",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Io { .. } => "IO_ERROR",
            Error::Json(_) => "JSON_ERROR",
        }
    }

    /// Whether the failure is worth retrying against the same provider/backend.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Provider(_) | Error::Backend(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
