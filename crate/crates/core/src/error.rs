use thiserror::Error;

/// Every failure the library reports. The CLI maps each variant to its own exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid input data (degenerate boxes, unparseable values).
    #[error("validation error: {0}")]
    Validation(String),
    /// Optimization failed (non-finite gradients, accuracy threshold not reached).
    #[error("training error: {0}")]
    Training(String),
    /// Unknown key in a config file or override.
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    /// Config text that does not parse.
    #[error("malformed config at line {line}: {msg}")]
    MalformedConfig { line: usize, msg: String },
    /// Checkpoint or dataset container that cannot be loaded.
    #[error("load error: {0}")]
    Load(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("format version {found} not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage_err(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

impl Error {
    /// Process exit status for this error; each variant has its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::UnknownKey(_) => 4,
            Error::MalformedConfig { .. } => 5,
            Error::MissingFile(_) => 6,
            Error::Load(_) => 7,
            Error::Checksum { .. } => 8,
            Error::Version { .. } => 9,
            Error::Validation(_) => 10,
            Error::Training(_) => 11,
            Error::Io(_) => 12,
            Error::Json(_) => 13,
        }
    }
}
