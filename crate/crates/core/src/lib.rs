//! Missing-aware representation learning for sparse multivariate time series.
//!
//! The crate is `no_std` (with `alloc`) and carries everything that is pure
//! computation: a small reverse-mode autodiff tape over dense `f64` tensors,
//! the variable-independent encoder, the missing-aware attention blocks, the
//! two-stage pre-training / fine-tuning loops, synthetic data generation and
//! the evaluation metrics. File formats, the CLI and anything else touching
//! the operating system live in the `smart` companion crate.
//!
//! Enable the `std` feature to let the matrix kernels use runtime CPU feature
//! detection.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod mart;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
