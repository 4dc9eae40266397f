//! Dense row-major tensors with a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value: shape plus a flat buffer. Differentiable
//! computation goes through a [`Tape`], which hands out [`Var`] handles and
//! records every operation so that [`Tape::backward`] can replay them in
//! reverse. Values default to 64-bit; a tape created with [`DType::F32`]
//! rounds every recorded value to single precision.

mod checkpoint;
mod error;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{ArrayData, Checkpoint, CheckpointError, NamedArray};
pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamConfig, AdamState, OptimError};
pub use tape::{concat_rows, Gradients, Tape, Var};
pub use tensor::{DType, Tensor};
