use thiserror::Error;

/// Errors surfaced by the simulator and its scheduling components.
#[derive(Debug, Error)]
pub enum Error {
    /// A scenario, workload or component was configured with invalid values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A trace file row could not be parsed.
    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    /// Adapter matrices of one client do not match the rest of the round.
    #[error(
        "aggregation error: client {client} has adapter shape {found:?}, expected {expected:?}"
    )]
    Aggregation {
        client: usize,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    /// Arithmetic guard on a value that must be strictly positive.
    #[error("arithmetic guard: {0}")]
    Guard(String),

    /// A schedule broke one of the dispatch constraints (a)–(d).
    #[error("constraint ({constraint}) violated: {detail}")]
    ConstraintViolation { constraint: char, detail: String },

    /// An oracle instance is too large for exhaustive search.
    #[error("instance too large for enumeration: {0}")]
    InstanceTooLarge(String),

    /// Two reports cannot be compared.
    #[error("reports are not comparable: field `{field}` differs")]
    Mismatch { field: String },

    /// Broken engine invariant. Always a bug.
    #[error("internal invariant breached: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
