use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("concept space mismatch: params bound to {expected}, got {found}")]
    Binding { expected: String, found: String },

    #[error("malformed file at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("incompatible file version: expected {expected}, found {found}")]
    Incompatible { expected: String, found: String },

    #[error("perturbation search failed: non-finite gradient from {term}")]
    Perturbation { term: &'static str },

    #[error("training diverged at epoch {epoch} (last good epoch: {last_good_epoch:?})")]
    Training {
        epoch: usize,
        last_good_epoch: Option<usize>,
    },

    #[error("missing prerequisite {what}: {path}")]
    Missing { what: &'static str, path: String },

    #[error("invalid config: {path}: {detail}")]
    Config { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }
}
