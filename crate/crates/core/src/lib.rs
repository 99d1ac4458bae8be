//! Conditional hierarchical VAE for single-image super-resolution.
//!
//! The crate bundles a small reverse-mode autodiff engine, an unconditional
//! VDVAE-style model, its low-resolution-conditioned extension, training and
//! evaluation drivers, and the image utilities they share.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod kernels;
pub mod params;
pub mod sr;
pub mod tensor;
pub mod toydata;
pub mod training;
pub mod vdvae;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
