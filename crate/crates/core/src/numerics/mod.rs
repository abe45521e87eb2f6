//! Dense matrices, activations, the deterministic random stream and the
//! finite-difference gradient oracle.

mod matrix;
mod rng;

pub use matrix::{
    bilinear_equivalence, concat_cols, finite_diff_grad, matmul, relative_error, relu, row_stats,
    sigmoid, sigmoid_scalar, softmax_rows, Matrix,
};
pub use rng::RngState;
