use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside domain [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite position at step {step}, particle {particle}")]
    NonFinite { step: u64, particle: usize },

    #[error("non-finite reward {value} at probe {probe}")]
    NonFiniteReward { probe: usize, value: f64 },

    #[error("non-finite guide value at grid cell ({ix}, {iy})")]
    NonFiniteGuide { ix: usize, iy: usize },

    #[error("empty particle ensemble")]
    EmptyEnsemble,

    #[error("budget parity violated at r={r}: {detail}")]
    BudgetParity { r: f64, detail: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::Domain { what, value, lo, hi })
    }
}
