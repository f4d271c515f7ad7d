//! Reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use ops::concat_axis;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tensor::{ParamSet, Tensor};
