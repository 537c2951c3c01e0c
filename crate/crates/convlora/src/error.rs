use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value produced by {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    #[error("degenerate gate: all scores -inf along the softmax axis")]
    DegenerateGate,
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
