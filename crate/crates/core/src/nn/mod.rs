//! Small double-precision neural network stack: tensors, a reverse-mode tape,
//! the stride-4 detector, optimizers, weight averaging and the training loop.

pub mod ema;
pub mod gemm;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
