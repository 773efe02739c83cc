//! Disentangled safety adapters on a small decoder-only transformer.
//!
//! A frozen base model exposes per-layer hidden states and logits through
//! read-only taps; adapter modules consume those taps to classify inputs as
//! unsafe or to steer generation by logit interpolation, without touching
//! base parameters or adding a second full model pass. The crate contains
//! the full stack: a reverse-mode autodiff engine, the transformer,
//! the adapter family and its training loops, a deterministic synthetic
//! benchmark, evaluation metrics with an analytic FLOP counter, and an
//! end-to-end experiment pipeline.

pub mod alignment;
pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod side;
pub mod synthbench;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{grad_check, no_grad, Elem, Tensor};
