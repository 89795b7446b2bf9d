use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvoError>;

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: u64, detail: String },

    #[error("not enough samples: need at least {needed}, got {got} ({what})")]
    SampleSize {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EvoError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        EvoError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        EvoError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        EvoError::Config(msg.into())
    }
}
