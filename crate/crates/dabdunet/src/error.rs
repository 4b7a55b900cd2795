use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A value-level precondition was violated (non-scalar loss, non-binary
    /// mask, empty sequence, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Invalid model, dataset, or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Tensors from different tapes were combined in one operation.
    #[error("tape mismatch: operands belong to different tapes")]
    TapeMismatch,

    /// A tensor that is not tracked on a tape was used where a tracked one
    /// is required.
    #[error("tensor is not tracked on the active tape")]
    Untracked,

    /// Malformed tensor file; `offset` is the byte position where parsing
    /// failed.
    #[error("tensor file corrupt at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Weight file does not match the parameter schema of the model it is
    /// being loaded into.
    #[error("weight schema mismatch: missing {missing:?}, unexpected {extra:?}")]
    SchemaMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    /// Training produced a non-finite loss.
    #[error(
        "training diverged at epoch {epoch}, step {step}: loss = {loss}; \
         recent losses: {recent:?}"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        recent: Vec<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
