//! Minimal dense-tensor math: the operators the heads need, their exact
//! backward passes, Adam, and a finite-difference gradient oracle.

mod adam;
pub mod gradcheck;
mod ops;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use gradcheck::{finite_diff_check, CheckConfig, GradReport, Objective, ParamCheck};
pub use ops::{
    cosine_rows, linear, linear_backward, log_softmax, log_softmax_backward, relu,
    relu_backward, Cosine, Param, MIN_NORM,
};
pub use tensor::Tensor;
pub(crate) use tensor::norm;
#[cfg(test)]
pub(crate) use tensor::dot;
