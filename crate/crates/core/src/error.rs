use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    #[error("invalid crop region: {0}")]
    InvalidRegion(String),

    #[error("invalid network config: {0}")]
    InvalidNetConfig(String),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("invalid offset grid: {0}")]
    InvalidOffsetGrid(String),

    #[error("offset {0} lies outside the search envelope")]
    OutsideEnvelope(String),

    #[error("pose ({x:.3}, {y:.3}) lies outside the map extent")]
    PoseOutsideMap { x: f64, y: f64 },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),

    #[error("forward pass did not retain activations")]
    MissingActivations,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}
