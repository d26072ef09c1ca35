//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and CPU-only. A [`Graph`] is built per forward pass
//! and discarded after [`Graph::backward`]; learnable state lives in a
//! [`ParamStore`] and is updated with [`Adam`].

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, Precision};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
