use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Variants are grouped by the CLI exit code they map to: configuration
/// problems, data/file problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("numeric input error in {op}: {reason}")]
    NumericInput { op: &'static str, reason: String },
    #[error("unsupported size {size} for {op}: only powers of two are supported")]
    UnsupportedSize { op: &'static str, size: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("history length mismatch: expected {expected} frames, got {got}")]
    HistoryLength { expected: usize, got: usize },
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("stability bound violated: {0}")]
    Stability(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::HistoryLength { .. }
            | Error::UnknownOp(_)
            | Error::Stability(_)
            | Error::Json(_) => ErrorClass::Config,
            Error::Format(_) | Error::Checksum { .. } | Error::Io(_) | Error::EmptyBatch(_) => {
                ErrorClass::Data
            }
            Error::Dimension { .. }
            | Error::Shape { .. }
            | Error::NumericInput { .. }
            | Error::UnsupportedSize { .. }
            | Error::Contract(_)
            | Error::NonFinite(_) => ErrorClass::Numeric,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}
