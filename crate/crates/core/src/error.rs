use thiserror::Error;

/// Error type shared by every module in this crate.
///
/// The variants map onto the failure classes callers are expected to
/// distinguish: bad wiring (`Config`), misuse of an otherwise valid object
/// (`Usage`), non-finite arithmetic (`Numeric`), inputs outside an
/// operation's mathematical domain (`Domain`), inputs that are so
/// ill-conditioned the answer would be meaningless (`Degenerate`), and
/// observations with zero likelihood under every hypothesis
/// (`ImpossibleEvidence`).
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("evidence has zero probability under every context")]
    ImpossibleEvidence,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("check suite failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Process exit code the CLI maps this error onto: 1 for bad
    /// configuration or usage, 2 for runtime failures (I/O, data, numeric
    /// aborts), 3 for a failed check suite.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) | CoreError::Usage(_) => 1,
            CoreError::Io(_)
            | CoreError::Checkpoint(_)
            | CoreError::Data(_)
            | CoreError::Numeric(_)
            | CoreError::Domain(_)
            | CoreError::Degenerate(_)
            | CoreError::ImpossibleEvidence => 2,
            CoreError::CheckFailed(_) => 3,
        }
    }
}
