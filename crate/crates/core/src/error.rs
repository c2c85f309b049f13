use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-30)")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("probability vector is not a distribution (sum = {sum})")]
    InvalidDistribution { sum: f64 },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),

    #[error("label vector has length {labels}, store has {rows} rows")]
    LabelLengthMismatch { labels: usize, rows: usize },

    #[error("malformed record on line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("empty text{}", .0.as_deref().map(|id| format!(" in record {id:?}")).unwrap_or_default())]
    EmptyText(Option<String>),

    #[error("no corpus record matches the filter keywords")]
    EmptyFilterResult,

    #[error("rank {rank} exceeds corpus size {corpus}")]
    RankExceedsCorpus { rank: usize, corpus: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("text-branch predictions are required")]
    MissingTextPredictions,

    #[error("invalid p-value {0} (must lie in (0, 1])")]
    InvalidPValue(f64),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("manifest and pairing describe different instances: {0}")]
    InstanceMismatch(String),

    #[error("unknown text id {0:?}")]
    UnknownTextId(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
