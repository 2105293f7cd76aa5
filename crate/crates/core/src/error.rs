use thiserror::Error;

use crate::config::ConfigError;
use crate::geometry::GeometryError;
use crate::tensor::TensorError;
use crate::vocab::VocabError;

/// Errors raised while building or running the network.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
