use thiserror::Error;

use crate::fock::ModeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A transfer matrix or mode transform amplifies some input.
    #[error("non-physical transform: largest singular value {0} exceeds 1")]
    NonPhysical(f64),

    #[error("mode {0} appears in both operands")]
    ModeOverlap(ModeId),

    #[error("mode {0} is not present in the state")]
    MissingMode(ModeId),

    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
}
