//! Dense f64 tensor kernel with reverse-mode gradients.
//!
//! Everything the model touches is a [`Tensor`]: a row-major `Vec<f64>` plus a
//! shape. Differentiable computations are built on a [`tape::Tape`] that records
//! each primitive eagerly and replays vector-Jacobian products in reverse.
//! Trainable weights live in a [`store::ParamStore`], addressable by path, and
//! [`gradcheck::grad_check`] compares reverse-mode gradients against a
//! central-difference oracle.

mod dense;
pub mod gradcheck;
pub mod store;
pub mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckReport, PathCheck};
pub use store::ParamStore;
pub use tape::{Gradients, Tape, TensorId};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
