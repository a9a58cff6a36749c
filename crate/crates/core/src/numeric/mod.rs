//! Dense tensors and reverse-mode differentiation.
//!
//! All arithmetic is `f64`, row-major, with a fixed reduction order, so a
//! run is bit-reproducible for a fixed seed within one build.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_with_numeric, grad_check, relative_error, GradCheckReport,
    ParamCheck,
};
pub use graph::{BinaryKind, Graph, Var};
pub use tensor::Tensor;
