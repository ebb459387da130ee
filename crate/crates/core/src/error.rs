use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"WPFT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype {0} (expected 1 = f32)")]
    UnsupportedDtype(u32),

    #[error("unsupported ndim {0} (expected 2)")]
    BadNdim(u32),

    #[error("truncated payload: header declares {expected} bytes, only {actual} present")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("payload length mismatch: header declares {expected} bytes, file holds {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("non-finite value at ({row},{col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error(
        "perturbed latents need {needed} bytes, over the {budget}-byte budget; \
         project in smaller sample batches (streaming mode)"
    )]
    MemoryBudget { needed: u64, budget: u64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero probability in bin {bin}; histogram was not epsilon-regularized")]
    ZeroProbability { bin: usize },

    #[error("histograms use different bin specs")]
    BinSpecMismatch,

    #[error("missing value for {row} on {column}")]
    MissingCell { row: String, column: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
