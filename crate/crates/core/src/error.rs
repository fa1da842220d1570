use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The experimental protocol cannot proceed (for example an attack that
    /// produced no usable triplets, or a detector fed a single class).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("restorer `{name}` violated its contract: {reason}")]
    RestorerContract { name: String, reason: String },

    #[error("attack `{name}` failed: {reason}")]
    Attack { name: String, reason: String },

    #[error("DSS loop {index}: {source}")]
    Loop { index: usize, source: Box<Error> },

    #[error("feature alignment failed, missing ids: {}", .0.join(", "))]
    Alignment(Vec<String>),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn at_loop(self, index: usize) -> Self {
        Error::Loop { index, source: Box::new(self) }
    }
}
