use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch for {id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("bad weight file: {0}")]
    BadWeightFile(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite intermediate value in {0}")]
    NonFiniteIntermediate(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("index is empty")]
    EmptyIndex,
    #[error("no guideline cached for category {0:?}")]
    MissingGuideline(String),
    #[error("no feedback stored for record {0:?}")]
    MissingFeedback(String),
    #[error("context bundle inconsistent with its flags: {0}")]
    InconsistentBundle(String),
    #[error("too many reports for one guideline request: {0} (max 20)")]
    TooManyReports(usize),
    #[error("request timed out")]
    Timeout,
    #[error("http status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<Error> },
    #[error("unknown backend kind {0:?}")]
    UnknownKind(String),
    #[error("prompt carries no nearest-neighbour context")]
    NoNnContext,
    #[error("reference is empty")]
    EmptyReference,
    #[error("length mismatch: {candidates} candidates vs {references} references")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("entity extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error("required {0} store is missing")]
    MissingStore(String),
    #[error("{failed} record(s) failed; see {manifest}")]
    PartialFailure { failed: usize, manifest: PathBuf },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from a generation backend or entity
    /// extractor rather than from invalid local input.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Timeout
                | Error::HttpStatus { .. }
                | Error::MalformedResponse(_)
                | Error::Transport(_)
                | Error::ExhaustedRetries { .. }
                | Error::NoNnContext
                | Error::ExtractorUnavailable(_)
                | Error::PartialFailure { .. }
        )
    }

    /// Transport-level failures worth retrying: timeouts, connection errors,
    /// 429 and 5xx statuses.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Timeout | Error::Transport(_) => true,
            Error::HttpStatus { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}
