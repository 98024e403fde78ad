use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pipeline layout: {0}")]
    InvalidLayout(String),

    #[error("module index {index} out of range 1..={k}")]
    IndexOutOfRange { index: usize, k: usize },

    #[error("module {index}: payload kind {found} does not match slot kind {expected}")]
    TypeMismatch {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("module {index} is both replaced and frozen")]
    InterventionConflict { index: usize },

    #[error("module {index} is frozen but no baseline episode was supplied")]
    FrozenWithoutBaseline { index: usize },

    #[error("baseline episode does not match the run: {0}")]
    BaselineMismatch(String),

    #[error("module {index} execution failed: {message}")]
    Backend { index: usize, message: String },

    #[error("oracle has no entry for task {task_id} module {index}")]
    MissingOracle { task_id: String, index: usize },

    #[error("oracle cache sealed: no entry for task {task_id} module {index}")]
    OracleCacheSealed { task_id: String, index: usize },

    #[error("oracle cache already holds a value for task {task_id} module {index}")]
    OracleCacheOverwrite { task_id: String, index: usize },

    #[error("mediation needs an upstream module; module {0} has none")]
    NoUpstream(usize),

    #[error("severity {value} at module {index} is outside [0, 1)")]
    SeverityOutOfRange { index: usize, value: f64 },

    #[error("judge failure: {0}")]
    Judge(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown configuration tag: {0}")]
    UnknownConfiguration(String),

    #[error("split hygiene violated: prescription task {0} appears in a correction pool")]
    SplitHygiene(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
