use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced at node {node} ({context})")]
    NonFinite { node: usize, context: String },
    #[error("non-finite gradient for parameter {0}; optimizer step aborted")]
    NonFiniteGradient(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bitstream error: {0}")]
    Bitstream(String),
    #[error("crc mismatch in frame {0} payload")]
    CrcMismatch(u32),
    #[error("truncated stream while reading frame {0}")]
    Truncated(u32),
    #[error("frame {got} out of order (expected {expected})")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("unsupported bitstream version {0}")]
    Version(u16),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at frame {frame}, step {step} (seed {seed})")]
    Diverged { frame: u32, step: u32, seed: u64 },
    #[error("{0}")]
    Msg(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
