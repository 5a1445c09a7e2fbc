//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{argmin_distance, reverse_accumulate, Axis, GradMap, Gradients, Graph, NodeId, NORM_EPS};
pub use params::ParamStore;
pub use tensor::Tensor;

pub(crate) use graph::{dot, hinge_rank_value};
