//! Dense `f64` tensors, a reverse-mode tape, Adam, and a finite-difference
//! gradient oracle.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::finite_difference_check;
pub use params::ParameterStore;
pub use tape::{cross_entropy, kl_standard_normal, Gradients, SparseRow, Tape, Var, PROB_EPS};
pub use tensor::{affine_forward, log_softmax_rows, matmul, softmax_rows, transpose, Tensor};
