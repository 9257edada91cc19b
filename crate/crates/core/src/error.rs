use thiserror::Error;

/// Errors raised by the simulator, the learners and the numerical kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pool of {pool} tasks exceeds max_T = {max_t}")]
    Capacity { pool: usize, max_t: usize },

    #[error("non-finite gradient in parameter `{param}`")]
    Numerical { param: String },

    #[error("data integrity error at event {event}: {detail}")]
    DataIntegrity { event: usize, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
