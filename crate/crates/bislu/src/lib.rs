//! Bidirectional joint model for multi-intent detection and slot filling:
//! a trainable transformer encoder, span-based slot scoring with a biaffine
//! layer, contrastive and self-distillation losses, and a small reverse-mode
//! autodiff engine underneath.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;
pub mod views;

pub use autodiff::{RngState, Scalar, Tape, Tensor, Var};
