use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the engine.
///
/// Every variant carries a stable, module-tagged code (see [`Error::code`]) and
/// maps onto one of the CLI exit classes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("attention requires at least one key row")]
    EmptyKeys,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated payload: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("frame {got} appended after frame {last}; indices must strictly increase")]
    OutOfOrder { last: u32, got: u32 },

    #[error("frame {0} is not present in the feature buffer")]
    MissingFrame(u32),

    #[error("value {0} does not survive a round-trip through 32-bit storage")]
    NotF32Exact(f64),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable `module.kind` identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "tensor.shape",
            Error::NonFinite(_) => "tensor.non_finite",
            Error::EmptyKeys => "tensor.empty_keys",
            Error::InvalidArgument(_) => "core.invalid_argument",
            Error::BadMagic { .. } => "format.bad_magic",
            Error::UnsupportedVersion { .. } => "format.version",
            Error::Truncated { .. } => "format.truncated",
            Error::Malformed(_) => "format.malformed",
            Error::OutOfOrder { .. } => "memory.out_of_order",
            Error::MissingFrame(_) => "memory.missing_frame",
            Error::NotF32Exact(_) => "memory.not_f32_exact",
            Error::EmptyBank => "memory.empty_bank",
            Error::Config(_) => "config.invalid",
            Error::Io(_) => "io.error",
        }
    }

    /// Process exit code: 2 format, 3 config, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed(_) => 2,
            Error::Config(_) | Error::Shape { .. } | Error::InvalidArgument(_) => 3,
            Error::NonFinite(_) | Error::NotF32Exact(_) => 4,
            _ => 1,
        }
    }
}
