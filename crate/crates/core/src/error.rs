use std::io;

use thiserror::Error;

/// Errors produced anywhere in the CMAE stack.
#[derive(Debug, Error)]
pub enum CmaeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("similarity error: {0}")]
    Similarity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CmaeError> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::CmaeError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
