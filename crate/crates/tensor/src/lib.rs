//! Dense f64 tensors, a recording graph with reverse-mode differentiation,
//! neural-network building blocks, Adam and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
