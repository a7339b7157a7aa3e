use thiserror::Error;

/// Errors surfaced by every layer of the overlay.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("unknown circuit {0}")]
    UnknownCircuit(u64),
    #[error("duplicate link between `{0}` and `{1}`")]
    DuplicateLink(String, String),
    #[error("QKD session timed out waiting on the classical channel")]
    SessionTimeout,
    #[error("reconciliation failed: final key digests differ")]
    ReconciliationFailed,
    #[error("circuit unavailable: {0}")]
    CircuitUnavailable(String),
    #[error("path unavailable at hop {hop}: {reason}")]
    PathUnavailable { hop: usize, reason: String },
    #[error("key material exhausted on link `{0}`")]
    KeyExhausted(String),
    #[error("delivery failed after {attempts} attempts (sequence {sequence_id})")]
    DeliveryFailed { sequence_id: u64, attempts: u32 },
    #[error("synchronized random stream out of step: {0}")]
    Desync(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("partial aggregate, regions without a report: {missing:?}")]
    PartialAggregate { missing: Vec<usize> },
    #[error("no item satisfies the predicate")]
    NotFound,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("wrong circuit kind: {0}")]
    WrongKind(String),
    #[error("timed out after {0} ticks")]
    Timeout(u64),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
