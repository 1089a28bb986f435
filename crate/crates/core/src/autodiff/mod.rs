//! Dense `f64` tensors, a reverse-mode tape, basic layers and Adam.

mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{GradMap, NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;

