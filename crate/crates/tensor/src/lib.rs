//! Minimal dense tensor algebra with tape-based reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; every primitive records its inputs so that
//! [`Tape::backward`] can replay the graph in reverse. Learned weights are
//! kept in a [`ParamStore`] and bound onto a fresh tape for every step.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
