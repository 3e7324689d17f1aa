//! Reverse-mode automatic differentiation over dense tensors, SGD and a
//! finite-difference gradient checker.

mod float;
pub mod gradcheck;
mod ops;
pub mod optim;
mod tensor;

pub use float::Float;
pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheck};
pub use optim::{OptimizerState, SgdConfig};
pub use tensor::{op_count, reset_op_count, Tensor};

