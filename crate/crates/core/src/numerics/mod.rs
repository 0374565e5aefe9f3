//! Tensors, reverse-mode differentiation, losses and the optimizer.

mod dropout;
mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use dropout::Dropout;
pub use gradcheck::{central_difference, check_gradients, relative_error, GradCheck, FD_STEP};
pub use ops::{Mask, Reduction};
pub use optim::{optimizer_step, NoamSchedule, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
