use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range 0..{bound} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("chunk {chunk} holds {count} tokens, above the predictor ceiling {n_max}")]
    Label {
        chunk: usize,
        count: usize,
        n_max: usize,
    },

    #[error("utterance {index}: {source}")]
    Utterance {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("session state: {0}")]
    State(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint field `{field}` at byte {offset}: {reason}")]
    Checkpoint {
        field: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("feature file: {0}")]
    Features(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
