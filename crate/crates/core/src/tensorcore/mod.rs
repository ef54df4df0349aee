//! Dense tensors with tape-based reverse-mode differentiation over a fixed
//! operation vocabulary, plus SGD and the checkpoint container.

pub mod checkpoint;
pub mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::Sgd;
pub use tape::{conv_output_size, Tape, Var};
pub use tensor::Tensor;
