use thiserror::Error;

/// Crate-wide error type. Variants are grouped by subsystem so callers
/// (notably the CLI) can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Input outside the operation's domain (log of a non-positive value,
    /// sqrt of a negative value). Raised in 64-bit verification mode.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An operation on finite inputs produced a non-finite value.
    #[error("non-finite result produced by {op}")]
    NonFinite { op: &'static str },

    /// Training diverged (non-finite loss). Carries enough context to
    /// point at the offending step.
    #[error("numeric divergence: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} not supported (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint checksum mismatch: file is corrupt")]
    CheckpointChecksum,

    #[error("checkpoint does not match the requested model: {0}")]
    CheckpointMismatch(String),

    #[error("gradient check failed for {op}: max relative error {err:.3e} exceeds tolerance {tol:.3e}")]
    GradCheck { op: String, err: f64, tol: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
}
