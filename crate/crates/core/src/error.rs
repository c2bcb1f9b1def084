use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid structure: {0}")]
    Invalid(String),
    #[error("resource cap exceeded: {0}")]
    Resource(String),
    #[error("mark mode mismatch: {0}")]
    Mode(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! domain {
    ($($arg:tt)*) => { $crate::Error::Domain(alloc::format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::Error::Invalid(alloc::format!($($arg)*)) };
}
pub(crate) use domain;
pub(crate) use invalid;
