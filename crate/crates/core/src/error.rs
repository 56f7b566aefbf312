use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DmvError>;

#[derive(Debug, Error)]
pub enum DmvError {
    /// A caller broke a documented precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint / snapshot container problems (version, corruption, missing tensors).
    #[error("container error: {0}")]
    Container(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bail out with a contract violation unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::DmvError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
