//! Simulation and optimization toolkit for compressed-sensing fluorescence
//! microscopy with Hadamard-basis acquisitions.
//!
//! The pipeline is: ground-truth image `x` → complementary Hadamard
//! acquisitions corrupted by Poissonian-Gaussian noise ([`noise`]) → a
//! stochastic per-coefficient inclusion mask ([`mask`]) → averaged
//! coefficients `z` ([`sensing`]) → image space → reconstruction
//! ([`recon`]). The mask and a convolutional reconstructor can be optimized
//! jointly under a total-measurement budget ([`train`]) using the reverse-mode
//! engine in [`diff`].

pub mod data;
pub mod diff;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod noise;
pub mod raster;
pub mod recon;
pub mod sensing;
pub mod train;
pub mod wht;

pub use error::{Error, Result};
pub use raster::Image;
