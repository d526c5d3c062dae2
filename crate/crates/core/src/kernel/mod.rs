//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamState, Moment};
pub use tape::{softmax_in_place, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
