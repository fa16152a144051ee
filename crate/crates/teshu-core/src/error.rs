use alloc::string::String;
use core::fmt;

/// Errors surfaced by template parsing, instantiation, and plan execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    InvalidArgument(String),
    /// A partition or combiner function id is not registered.
    UnknownFunction(String),
    /// A template could not be specialized for a shuffle call.
    Instantiation(String),
    /// A plan misbehaved at execution time (bad partition index,
    /// double publish, type mismatch on a channel, ...).
    PlanExecution(String),
    /// Template text failed to parse or validate.
    Parse(String),
    /// All live workers are blocked on RECV/FETCH; the message carries
    /// the wait graph.
    Deadlock(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::UnknownFunction(m) => write!(f, "unknown function id: {m}"),
            Error::Instantiation(m) => write!(f, "template instantiation failed: {m}"),
            Error::PlanExecution(m) => write!(f, "plan execution error: {m}"),
            Error::Parse(m) => write!(f, "template parse error: {m}"),
            Error::Deadlock(m) => write!(f, "deadlock: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
