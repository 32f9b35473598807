use thiserror::Error;

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowError {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("CFL violation: dt = {dt:e} exceeds the admissible step {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    /// The integration produced non-finite values. `snapshot` holds the last
    /// finite state in snapshot encoding when one is available.
    #[error("numerical abort at t = {time}: {reason}")]
    NumericalAbort {
        time: f64,
        reason: String,
        snapshot: Option<Vec<u8>>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration rejected; every violated precondition is listed.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FlowError::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FlowError::Invalid(msg.into())
    }
}
