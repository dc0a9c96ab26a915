//! Dense tensors, reverse-mode autodiff and the AdamW optimizer.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamWConfig, AdamWState};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
