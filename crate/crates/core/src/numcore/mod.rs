//! Tensors, reverse-mode differentiation, optimisation, losses and rank
//! statistics shared by the rest of the crate.

pub mod autodiff;
pub mod dense;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod rank;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use dense::{Dense, DenseVars};
pub use gradcheck::{
    grad_check, grad_check_many, grad_compare_many, GradCheckReport, GradComparison, GradEntry, GRAD_CHECK_STEP,
};
pub use loss::{bce_loss, bce_on_tape, mse_loss, mse_on_tape};
pub use optim::AdamState;
pub use rank::{kendall_tau, KendallTau};
pub use tensor::Tensor;
