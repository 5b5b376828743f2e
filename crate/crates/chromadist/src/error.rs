use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("channel value out of range on line {line}: {channel} = {value}")]
    ChannelOutOfRange {
        line: usize,
        channel: char,
        value: f64,
    },

    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("tokens absent from training vocabulary: {}", tokens.join(", "))]
    UnknownTokens { tokens: Vec<String> },

    #[error("description not seen during training: {0:?}")]
    UnknownDescription(String),

    #[error("extrapolation selection infeasible: requested {requested} descriptions, only {achievable} satisfy the constraints")]
    InfeasibleSelection { requested: usize, achievable: usize },

    #[error("value {0} outside [0, 1]")]
    DomainError(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training failed at epoch {epoch}, batch {batch}: {message}")]
    TrainingFailure {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
