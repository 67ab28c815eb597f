use std::fmt;

use thiserror::Error;

/// Row/column extent of a matrix, used in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("frame {requested} is not available yet ({received} frames received)")]
    FrameUnavailable { requested: usize, received: usize },

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("shape mismatch for tensor `{tensor}`: expected {expected}, file holds {found}")]
    ShapeMismatch {
        tensor: String,
        expected: Shape,
        found: Shape,
    },

    #[error("config mismatch for `{field}`: expected {expected}, file holds {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
