//! Self-contained reverse-mode autodiff: scalar abstraction, deterministic
//! RNG, dense tensors, the op tape, and a finite-difference checker.

mod check;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_at, CheckError, CheckReport};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tape::{Tape, Var, LOG_EPS};
pub use tensor::Tensor;
