//! A desk-scale laboratory for concept erasure in diffusion models.
//!
//! The crate builds a fully synthetic conditional diffusion model over
//! Gaussian-mixture "concept worlds" with an analytically exact oracle
//! classifier, implements a roster of weight-editing erasure methods
//! (gradient ascent, ESD-x/u, UCE, task vectors, RECE, STEREO), and runs a
//! suite of probes that quantify how much of an erased concept is still
//! recoverable: embedding inversion, discrete embedding attacks, inpainting,
//! diffusion completion, over-noised trajectory sampling, and steered latent
//! sampling with a timestep-aware classifier. Everything is deterministic
//! given a master seed.

pub mod classifier;
pub mod diffusion;
pub mod erasure;
pub mod error;
pub mod harness;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod world;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
