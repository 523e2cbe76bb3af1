use std::path::PathBuf;

use thiserror::Error;

use crate::types::Role;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranscriptError {
    #[error("message content is empty")]
    EmptyContent,
    #[error("system message at index {0}; only index 0 may hold one")]
    MisplacedSystem(usize),
    #[error("{role} message at index {index} breaks turn alternation")]
    Alternation { index: usize, role: Role },
    #[error("invalid seed sample: {0}")]
    InvalidSeed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("could not parse configuration: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::RateLimited(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("history must end with a user message, found {0}")]
    WrongTrailingRole(String),
    #[error("label list is empty")]
    EmptyLabel,
    #[error("profile text is empty")]
    EmptyProfile,
    #[error("round {round} outside 1..={total}")]
    RoundOutOfRange { round: usize, total: usize },
    #[error("no user messages to summarize")]
    NothingToSummarize,
    #[error("template for {role} references unknown placeholder {{{name}}}")]
    UnknownPlaceholder { role: String, name: String },
    #[error("placeholder {{{0}}} left unresolved")]
    Unresolved(String),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: BackendError,
    },
    #[error("no score digit found in reply")]
    NoScoreFound,
    #[error("cannot vote over an empty list")]
    EmptyVotes,
    #[error("summarizer returned an empty profile twice")]
    EmptyProfile,
    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),
    #[error("all {0} simulations failed for sample {1}")]
    AllSimulationsFailed(usize, String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("subset size {n} outside 1..={len}")]
    SubsetOutOfRange { n: usize, len: usize },
    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn backend(context: impl Into<String>, source: BackendError) -> Self {
        Error::Backend { context: context.into(), source }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the root cause is a transport failure worth retrying later.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Backend { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
