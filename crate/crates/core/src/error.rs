use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("degenerate distillation target at t={t}: |denominator| = {denominator:e}")]
    DegenerateTarget { t: f64, denominator: f64 },

    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint model mismatch: {0}")]
    ModelKind(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("run directory is locked: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI. Each error family maps to a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Domain(_) | Error::Numeric(_) | Error::DegenerateTarget { .. } => 3,
            Error::Io(_) => 4,
            Error::Checksum { .. } => 5,
            Error::Version { .. } => 6,
            Error::ModelKind(_) | Error::Shape(_) | Error::Format(_) => 7,
            Error::Prerequisite(_) => 8,
            Error::Argument(_) => 9,
            Error::Locked(_) => 10,
        }
    }
}
