use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("token {token} out of vocabulary (size {vocab}){}", context.as_ref().map(|c| format!(" at {c}")).unwrap_or_default())]
    Vocab {
        token: u32,
        vocab: usize,
        context: Option<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("benchmark error: {0}")]
    Bench(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
