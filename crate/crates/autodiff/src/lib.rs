//! Dense `f64` matrices, a reverse-mode tape and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::CheckpointError;
pub use graph::{Adjoints, Graph, Var, MASK_NEG};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
