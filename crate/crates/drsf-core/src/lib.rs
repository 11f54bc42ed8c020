//! Core library for the DRSF experiment framework: a dense-tensor engine
//! with reverse-mode automatic differentiation, the DFDR feature
//! decoupling/reassembly module, the MDSF multi-domain soft-fusion module,
//! a procedural multi-domain image benchmark, and the training/evaluation
//! loops that tie them together.
//!
//! The crate is `no_std` (alloc required). All floating point math goes
//! through [`math`], which delegates to `libm` so that results do not
//! depend on the platform's libm. Everything downstream of a fixed seed is
//! bit-reproducible.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod dfdr;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hash;
pub mod math;
pub mod mdsf;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use rng::RngStream;
pub use tensor::{GradientTape, Tensor};
