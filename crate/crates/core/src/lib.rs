//! Core algorithms for multi-modal trajectory sampling in highway driving:
//! a tape-based reverse-mode autodiff engine, polynomial trajectory QPs, a
//! vector-quantized autoencoder with a differentiable QP decoder, an
//! autoregressive latent sampler, a barrier-function safety filter solved by
//! unrolled alternating minimization, and a kinematic traffic simulator.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `vqdrive` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod error;
pub mod expert;
pub mod filter;
pub mod linalg;
pub mod math;
pub mod nn;
pub mod obs;
pub mod sampler;
pub mod sim;
pub mod tape;
pub mod tensor;
pub mod trajgen;
pub mod vqvae;

pub use error::CoreError;
pub use tensor::Tensor;
