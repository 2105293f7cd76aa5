//! Late-aggregation 3D dense captioning on point clouds.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod queries;
pub mod scenegen;
pub mod tensor;
pub mod tgi;
pub mod trainer;
pub mod vocab;

pub use error::{ModelError, ModelResult};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError};
