//! Dense matrices, normalization/activation kernels, losses and the
//! finite-difference gradient oracle.

mod finite_diff;
mod kernels;
mod matrix;
mod param;

pub use finite_diff::{finite_difference_gradient, relative_error};
pub use kernels::{
    classification_loss, classification_loss_with_grad, layer_norm, layer_norm_backward, layer_norm_with_cache,
    log_sum_exp, relu, sigmoid, softmax_rows, softmax_rows_backward, LayerNormCache, Targets, DEFAULT_LN_EPS,
};
pub use matrix::{dot, Matrix};
pub use param::{ParamId, ParamStore, Parameter};
