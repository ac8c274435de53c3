//! Dense tensors, reverse-mode differentiation, Adam, finite-difference
//! checking and checkpoint persistence.

mod adam;
mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeometry;
pub use params::{BufferId, ParamId, ParamLeaf, ParamStore};
pub use tensor::Tensor;

pub use graph::sn_sigma;
