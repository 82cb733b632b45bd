use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical fault: {0}")]
    Numeric(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] pixelflow_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// 2 configuration, 3 data and IO, 4 numerical fault.
    pub fn exit_code(&self) -> i32 {
        use pixelflow_core::Error as C;
        match self {
            Error::Config(_) | Error::Core(C::Config(_)) => 2,
            Error::Data(_) | Error::Checkpoint { .. } | Error::Io { .. } => 3,
            Error::Core(C::Shape(_) | C::Input(_) | C::Empty(_)) => 3,
            Error::Numeric(_) | Error::Core(C::NonFinite { .. } | C::Singular { .. }) => 4,
        }
    }
}

macro_rules! fail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use fail;
