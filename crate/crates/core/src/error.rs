use thiserror::Error;

/// Failures while decoding a CFRV volume file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype {0}")]
    UnknownDtype(u8),
    #[error("dims overflow")]
    DimsOverflow,
    #[error("zero-sized dimension")]
    ZeroDim,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("label volume declares {0} classes")]
    BadClassCount(u32),
    #[error("label value {value} outside 0..{num_classes}")]
    LabelOutOfRange { value: u8, num_classes: u32 },
    #[error("image header carries K={0}, expected 0")]
    ImageWithClasses(u32),
    #[error("non-finite intensity")]
    NonFinite,
    #[error("slices must be square, got {h}x{w}")]
    NonSquare { h: usize, w: usize },
}

#[derive(Debug, Error)]
pub enum CfrError {
    #[error("parse error: {0}")]
    Parse(#[from] FormatError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("phantom generation failed: {0}")]
    Generation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Nn(#[from] cfr_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CfrError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CfrError {
    CfrError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> CfrError {
    CfrError::Shape(msg.into())
}
