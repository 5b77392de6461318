use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: shapes, hyperparameters, layer chains.
    #[error("configuration error: {0}")]
    Config(String),

    /// Layer chain does not compose; `layer` is the index of the offending layer.
    #[error("shape error at layer {layer}: {msg}")]
    LayerShape { layer: usize, msg: String },

    /// API misuse (backward without a tape, mismatched gradient lists, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("infeasible selection problem: E_total = {total} exceeds K * E_max = {capacity}")]
    Infeasible { total: usize, capacity: usize },

    /// Federated protocol violation, e.g. aggregating an empty round.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
