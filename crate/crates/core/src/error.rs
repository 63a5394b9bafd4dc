use std::path::PathBuf;

/// Errors raised by the gaitmorph library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("transport maps were fitted for codebook {expected:016x}, found {found:016x}")]
    StaleMap { expected: u64, found: u64 },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed record at {location}: {detail}")]
    MalformedRecord { location: String, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn malformed(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::MalformedRecord {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
