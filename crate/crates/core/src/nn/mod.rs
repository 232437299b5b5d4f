//! Dense feedforward networks with manual backpropagation, Adam and the
//! finite-difference tooling used to verify every analytic gradient.

mod adam;
mod entropy;
pub mod gradcheck;
mod matrix;
mod mlp;

pub use adam::AdamState;
pub use entropy::entropy_of_policy;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use matrix::DenseMatrix;
pub use mlp::{softmax_rows, Forward, Gradients, Head, Layer, MlpParams};

