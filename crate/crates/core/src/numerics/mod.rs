//! Dense tensors, reverse-mode differentiation, Adam and finite-difference
//! gradient checking. Everything runs in 64-bit floats.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck, ParamCheckStatus};
pub use graph::{AnchorMode, Graph, Segment, Var};
pub use params::{Adam, AdamConfig, Gradients, Param, ParameterStore};
pub use tensor::{argmax, argmin, log_softmax, log_softmax_into, logsumexp, Tensor};

pub(crate) use graph::sq_dist_matrix;
