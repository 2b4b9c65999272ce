use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("unsupported format version {0:?}")]
    Version(String),
    #[error("invalid payload: {0}")]
    Payload(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("IoU undefined: both masks are empty")]
    EmptyUnion,
    #[error("degenerate stroke: {0}")]
    DegenerateStroke(String),
    #[error("interaction points coincide")]
    CoincidentPoints,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("cube lies entirely outside the scan")]
    CubeOutside,
    #[error("nodule does not fit inside the volume")]
    NoduleOutside,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
