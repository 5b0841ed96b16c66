use std::io;

use thiserror::Error;

use crate::governance::Decision;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Wire-format failure, always tagged with the byte offset where decoding stopped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at offset {offset}: {reason}")]
pub struct ProtocolError {
    pub offset: usize,
    pub reason: String,
}

impl ProtocolError {
    pub fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self { offset, reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, message: String },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("policy denied {action} for {subject} on {resource}: {decision}")]
    PolicyDenied {
        subject: String,
        action: String,
        resource: String,
        decision: Box<Decision>,
    },

    #[error("audit error: {0}")]
    Audit(String),

    #[error("site {site} dropped out: {reason}")]
    SiteDropout { site: String, reason: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn data(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Data { line, message: message.into() }
    }
}
