use ledvae_autodiff::AutodiffError;
use thiserror::Error;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Every violated invariant, not just the first one found.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("autodiff: {0}")]
    Autodiff(#[from] AutodiffError),
}

/// Coarse failure categories, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) => ErrorClass::Config,
            CoreError::Data(_) | CoreError::Container(_) | CoreError::Io(_) => ErrorClass::Data,
            CoreError::Numeric(_) => ErrorClass::Numeric,
            CoreError::Autodiff(AutodiffError::NonFinite(_)) => ErrorClass::Numeric,
            CoreError::Autodiff(_) => ErrorClass::Data,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
