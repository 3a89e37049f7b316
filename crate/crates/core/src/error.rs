use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("schema error in table `{table_id}`: {reason}")]
    Schema { table_id: String, reason: String },

    #[error("arity mismatch: header has {expected} columns, row has {got}")]
    Arity { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cannot encode empty text")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("remote service error (status {status}): {body}")]
    Remote { status: u16, body: String },

    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("inconsistent cluster assignment: {0}")]
    InconsistentAssignment(String),

    #[error("fused vector has near-zero norm; table and query embeddings cancel")]
    DegenerateFusion,

    #[error("query generation failed for table `{table_id}` clusters {clusters:?}")]
    Generation {
        table_id: String,
        clusters: Vec<usize>,
    },

    #[error("table `{table_id}`, stage {stage}: {source}")]
    Stage {
        table_id: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("duplicate table id `{0}`")]
    DuplicateId(String),

    #[error("fingerprint mismatch: index built with {expected}, got {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("index is empty")]
    EmptyIndex,

    #[error("unsupported index version {found} (max supported {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt index: {0}")]
    CorruptIndex(String),

    #[error("gold table ids missing from corpus: {0:?}")]
    MissingGold(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, table_id: &str, stage: &'static str) -> Self {
        Error::Stage {
            table_id: table_id.to_string(),
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
