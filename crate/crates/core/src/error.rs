use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {context} at coordinate {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("reflection coefficient {value} at frame {frame}, index {index} is outside (-1, 1)")]
    UnstableFilter { frame: usize, index: usize, value: f64 },
    #[error("signal of {len} samples is shorter than the required {needed}")]
    SignalTooShort { len: usize, needed: usize },
    #[error("signal length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("unknown representation selector `{0}`")]
    UnknownSelector(String),
}
