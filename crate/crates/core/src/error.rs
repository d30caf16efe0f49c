use thiserror::Error;

/// Errors raised anywhere in the sampler stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: wrong dimension, non-finite inputs, bad shapes.
    #[error("input error: {0}")]
    Input(String),

    /// The requested operation is not supported by this target or process.
    #[error("capability error: {0}")]
    Capability(String),

    /// Invalid configuration value; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Every importance weight was zero (log-weight of -inf) or NaN.
    #[error("degenerate weights: no particle carries finite weight")]
    DegenerateWeights,

    /// Non-finite gradient or loss during optimisation.
    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Converts a serde_json error on `text` into a byte-offset parse error.
    pub(crate) fn parse_json(text: &str, err: serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        let mut offset = 0usize;
        for (i, l) in text.split_inclusive('\n').enumerate() {
            if i + 1 == line {
                offset += column.saturating_sub(1);
                break;
            }
            offset += l.len();
        }
        Error::Parse { offset: offset.min(text.len()), message: err.to_string() }
    }
}
