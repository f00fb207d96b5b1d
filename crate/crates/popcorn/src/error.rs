use thiserror::Error;

/// Coarse abort reasons carried on the wire. Deliberately value-free so the
/// error channel cannot become a plaintext oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    ProtocolOrder = 1,
    MalformedFrame = 2,
    BoundOverflow = 3,
    Internal = 4,
}

impl AbortReason {
    pub fn from_code(code: u8) -> Self {
        match code {
            1 => AbortReason::ProtocolOrder,
            2 => AbortReason::MalformedFrame,
            3 => AbortReason::BoundOverflow,
            _ => AbortReason::Internal,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("key generation failed: {0}")]
    KeyGen(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("element is not invertible modulo n")]
    NonInvertible,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("certified magnitude bound exceeded: {0}")]
    BoundOverflow(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session aborted by peer: {0:?}")]
    Abort(AbortReason),

    #[error("malformed file or frame: {0}")]
    Format(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
