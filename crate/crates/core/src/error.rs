use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or names do not line up between a model, its parameters and its inputs.
    #[error("structural error: {0}")]
    Structural(String),

    /// A caller supplied an out-of-domain argument.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The federated protocol was violated (missing record, uncovered group, empty client).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A computation produced NaN or infinity.
    #[error("numerical error: {0}")]
    NonFinite(String),

    /// Not enough data points to draw the requested conclusion.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}
macro_rules! argument {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
macro_rules! protocol {
    ($($arg:tt)*) => { $crate::error::Error::Protocol(format!($($arg)*)) };
}
pub(crate) use {argument, protocol, structural};
