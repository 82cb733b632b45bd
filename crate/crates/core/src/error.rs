use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Tensor shapes or lengths do not fit the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value is out of its admissible range.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a precondition (non-finite, out of range, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// An operation that must produce at least one item produced none.
    #[error("empty result: {0}")]
    Empty(String),
    /// Average velocity is undefined this close to the data end of the path.
    #[error("time {t} is below the singularity guard t_min = {t_min}")]
    Singular { t: f64, t_min: f64 },
    /// A loss evaluated to NaN or infinity.
    #[error("non-finite loss ({which}) at {at}")]
    NonFinite { which: String, at: String },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
