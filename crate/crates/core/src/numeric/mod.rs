//! Dense linear algebra, the differentiable operator set, Adam and the
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use ops::{argmax, cosine_similarity, cross_entropy, kd_loss, l2_normalize, softmax};
pub use tape::{Gradients, Tape, Var};
