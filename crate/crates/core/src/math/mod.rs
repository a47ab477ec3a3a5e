//! Numeric foundation: tensors, reverse-mode autodiff, layers, optimizer.

pub mod adam;
pub mod graph;
pub mod nets;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Gradients, Graph, Node};
pub use nets::{Bind, GaussianNodes, GruCell, Linear, Mlp};
pub use params::{ParamError, ParamId, ParamStore, ParamTree};
pub use tensor::Tensor;
