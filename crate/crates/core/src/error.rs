use thiserror::Error;

/// Faults raised while decoding one of the binary containers (band stacks,
/// mask rasters, checkpoints). Every variant carries the byte offset the
/// decoder was at when the fault was detected, so corrupt files can be
/// diagnosed without a hex dump.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        expected: [u8; 4],
        found: [u8; 4],
        offset: u64,
    },
    #[error("unsupported container version {found} at byte {offset} (this build reads version {supported})")]
    UnsupportedVersion {
        found: u16,
        supported: u16,
        offset: u64,
    },
    #[error("truncated payload: needed {needed} more byte(s) at offset {offset}, {remaining} left")]
    Truncated {
        needed: u64,
        remaining: u64,
        offset: u64,
    },
    #[error("checksum mismatch at byte {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch {
        stored: u64,
        computed: u64,
        offset: u64,
    },
    #[error("invalid field at byte {offset}: {what}")]
    InvalidField { what: String, offset: u64 },
}

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract
    /// (shape mismatch, zero-length axis, out-of-range index, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is outside its documented domain.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data is structurally valid but semantically unusable
    /// (reflectance out of physical range, unknown band id, ...).
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    /// Training was aborted; the last checkpoint written before the abort is
    /// still on disk.
    #[error("training aborted at epoch {epoch}: {detail}")]
    TrainAbort { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Returns `Err(Error::Contract(...))` unless the condition holds.
macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

/// Returns `Err(Error::Config(...))` unless the condition holds.
macro_rules! config_check {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Config(format!($($arg)*)));
        }
    };
}

pub(crate) use config_check;
pub(crate) use contract;
