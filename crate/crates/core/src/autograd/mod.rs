//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS, MODEL_EPS};
pub use tape::{attention_probs, log_softmax_in_place, softmax_in_place, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

#[cfg(test)]
mod tests;
