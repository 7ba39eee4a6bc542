//! Desk-scale, fully differentiable motion-appearance synergistic network
//! (MASN) for video question answering.
//!
//! The crate bundles:
//!
//! - a dense f64 tensor kernel with reverse-mode gradients ([`tensor`]),
//! - a synthetic episode generator plus a binary episode container ([`data`]),
//! - the model itself: location/global encoders, a bidirectional-LSTM question
//!   encoder, per-stream object graphs with a residual two-layer GCN, bilinear
//!   attention glimpses, motion-appearance fusion, and the three task heads
//!   ([`model`]),
//! - a deterministic Adam training loop with checkpointing ([`train`]),
//! - the command-layer used by the `masn` binary: generate, train, eval,
//!   ablate, dump-attention, gradcheck ([`harness`]).

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{MasnError, Result};
