//! Dense tensors, forward kernels, and a reverse-mode tape.

mod gemm;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use graph::{BatchNormMode, Gradients, Graph, NodeId};
pub use ops::{BatchNormConfig, RunningMoments};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Train mode engages noise, dropout and batch statistics; infer mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
