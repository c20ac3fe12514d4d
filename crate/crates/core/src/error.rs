use thiserror::Error;

/// Error type shared by every simulator module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter `{0}` bound twice in one graph")]
    DuplicateParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("round aborted in stage `{stage}`: {source}")]
    RoundStage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    /// Tag an error with the federation round stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::RoundStage { stage, source: Box::new(self) }
    }
}
