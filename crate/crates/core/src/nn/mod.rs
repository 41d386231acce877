//! Minimal tensor and autograd machinery for the tracker network.

pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use graph::{BnParams, BnUpdate, Gradients, Graph, Mode, Taps, Var};
pub use params::{Buffer, BufferId, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
