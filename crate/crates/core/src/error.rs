use alloc::string::String;

/// Errors raised across the crate. Variants follow the failure classes of the
/// individual operations rather than the module that raised them.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("rank out of range: requested {requested}, allowed 1..={max}")]
    Rank { requested: usize, max: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("incompatible models: {0}")]
    Compatibility(String),
    #[error("sequence too long: {len} tokens exceeds limit {limit}")]
    Length { len: usize, limit: usize },
    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! value_err {
    ($($arg:tt)*) => { $crate::Error::Value(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
pub(crate) use value_err;
