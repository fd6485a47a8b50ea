use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid dataset request: {0}")]
    InvalidDataset(String),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown token `{0}`")]
    UnknownWord(String),
    #[error("pretraining corpus contains unseen-language token `{0}`")]
    UnseenLanguageToken(String),
    #[error("row {row} has norm {norm}, expected unit norm")]
    Unnormalized { row: usize, norm: f64 },
    #[error("all-padding input")]
    AllPadding,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid label {0}")]
    BadLabel(usize),
    #[error("sentence id mismatch at row {row}: {left} vs {right}")]
    IdMismatch {
        row: usize,
        left: String,
        right: String,
    },
    #[error("perplexity {perplexity} too large for {n} points")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("clique member missing from layout: {0}")]
    MissingCliqueMember(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file at byte offset {0}")]
    Truncated(usize),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
