use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("gradients were already computed on this tape; record a new tape")]
    BackwardTwice,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("weight fingerprint {found:#018x} does not match config fingerprint {expected:#018x}")]
    Fingerprint { expected: u64, found: u64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
