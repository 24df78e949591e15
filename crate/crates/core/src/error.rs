//! Crate-wide error type.
//!
//! Variants are grouped by how the binary maps them to exit codes:
//! configuration problems exit with 2, numeric failures (non-finite losses,
//! failed gradient checks) with 3, and partially failed sweeps with 4.

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Mismatched tensor/view dimensions in the gradient engine.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API precondition was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced non-finite values or a self-check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Inputs outside the domain of an operation (unknown token, empty group, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Support enumeration would exceed the configured cap.
    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    /// Invalid experiment configuration (unknown key, bad type, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// One or more sweep cells failed while others succeeded.
    #[error("sweep partially failed: {0}")]
    SweepPartial(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::SweepPartial(_) => 4,
            _ => 1,
        }
    }
}
