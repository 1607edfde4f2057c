use thiserror::Error;

/// Errors produced by the quantizers, kernels and file readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,

    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pad or reshape required: {cols} columns is not a multiple of {multiple}")]
    PadRequired { cols: usize, multiple: usize },

    #[error("invalid block: {0}")]
    InvalidBlock(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported scheme 0x{0:02x}")]
    UnsupportedScheme(u8),

    #[error("truncated header: {0}")]
    Truncated(&'static str),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: u64, found: u64 },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
