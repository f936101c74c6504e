use std::path::PathBuf;

use crate::model::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("position {0} is outside the generation span")]
    InvalidPosition(usize),

    #[error("position {0} is already committed")]
    DoubleCommit(usize),

    #[error("token {0} cannot be committed")]
    InvalidToken(TokenId),

    #[error("generation complete: no masked positions remain")]
    GenerationComplete,

    #[error("no masked positions to select from")]
    NoMaskedPositions,

    #[error("step budget exhausted for block {0}")]
    BudgetExhausted(usize),

    #[error("credit store cannot move from block {from} to block {to}")]
    InvalidTransition { from: usize, to: usize },

    #[error("script exhausted at call {call}{}", .position.map(|p| format!(", position {p}")).unwrap_or_default())]
    ScriptExhausted { call: u64, position: Option<usize> },

    #[error("denoiser unavailable: {0}")]
    DenoiserUnavailable(String),

    #[error("bridge protocol error: {0}")]
    Protocol(String),

    #[error("malformed logits: {0}")]
    MalformedLogits(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
}

/// Coarse error families, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Denoiser,
    Io,
    Engine,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::InvalidPrompt(_) | Error::Format { .. } => {
                ErrorKind::Config
            }
            Error::ScriptExhausted { .. }
            | Error::DenoiserUnavailable(_)
            | Error::Protocol(_)
            | Error::MalformedLogits(_) => ErrorKind::Denoiser,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Engine,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
