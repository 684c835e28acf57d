use std::fmt;

use thiserror::Error;

/// Domain violations detected while evaluating a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    NonFinite,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DomainKind::DivisionByZero => "division by zero",
            DomainKind::LogNonPositive => "log of non-positive value",
            DomainKind::SqrtNegative => "sqrt of negative value",
            DomainKind::NonFinite => "non-finite value",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op} expects {expected} argument(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("argument {arg} of new node {node} does not precede it")]
    ArgOutOfRange { node: usize, arg: usize },
    #[error("node {0} is not an input")]
    NotAnInput(usize),
    #[error("tape has no outputs")]
    NoOutputs,
    #[error("{what}: expected {expected} values, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{kind} at node {node}{}", lane.map(|l| format!(" (lane {l})")).unwrap_or_default())]
    Domain {
        node: usize,
        lane: Option<usize>,
        kind: DomainKind,
    },
    #[error("path {path}: {source}")]
    Path {
        path: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("evaluation state does not belong to this tape or kernel")]
    StaleState,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("composite program: {0}")]
    Composite(String),
    #[error("timer resolution too coarse: {0}")]
    TimerResolution(String),
    #[error("tape dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by non-finite or out-of-domain arithmetic.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Domain { .. } => true,
            Error::Path { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
