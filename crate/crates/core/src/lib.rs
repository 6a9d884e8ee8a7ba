//! Adversarial image toolkit: a from-scratch tensor autodiff engine, small CNN
//! training, a generator-based image attack, six gradient baseline attacks, and a
//! robustness harness that measures attack survival under affine and JPEG
//! transforms.
//!
//! Everything is CPU-only 32-bit float compute with 64-bit accumulation in
//! reductions. All randomness flows through the counter-based generator in
//! [`rng`], so runs are reproducible bit-for-bit across platforms for a fixed
//! seed.

pub mod attacks;
pub mod classifier;
pub mod error;
pub mod generator;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
#[cfg(test)] mod dbg { include!("/tmp/dbg_dip.rs"); }
