use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failures raised by the pure computation layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel value {value} outside [0, 255]")]
    BadRange { value: f64 },
    #[error("resolution {0} must be a power of two >= 64")]
    BadResolution(usize),
    #[error("empty sample set: {0}")]
    EmptySet(&'static str),
    #[error("not enough samples: need {needed}, have {available}")]
    InsufficientCorpus { needed: usize, available: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty unpaired pool")]
    EmptyPool,
    #[error("class validation failed: {0}")]
    EmptyClass(String),
    #[error("non-finite value in {what} at step {step}")]
    NonFiniteLoss { what: String, step: u64 },
    #[error("covariance is not positive semidefinite (eigenvalue {0})")]
    NonPsd(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
