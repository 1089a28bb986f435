use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("index {index} out of range (len {len}) in {what}")]
    Bounds {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown command `{0}` (expected left, right or straight)")]
    UnknownCommand(String),

    #[error("scenario infeasible for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
