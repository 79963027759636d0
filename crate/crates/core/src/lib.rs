//! Core algorithms for handwriting-to-machine-print translation.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! optimal-transport distances, a reverse-mode autodiff tape, the generator
//! and discriminator networks, the adversarial and CTC losses, the training
//! loops, synthetic data rendering, and the evaluation metrics. File formats,
//! PNG/CSV output and the command-line interface live in the companion
//! `handprint` crate.
//!
//! The crate is `no_std`-compatible (`--no-default-features --features libm`);
//! only `alloc` is required.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("handprint-core needs either the `std` or the `libm` feature");

extern crate alloc;

pub mod data;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ot;
pub mod rng;
pub mod swd;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use rng::Rng;
pub use tensor::Tensor;
