//! Differentiable feedback delay networks with proportional first-order
//! shelving attenuation, evaluated by frequency sampling.
//!
//! The crate covers the full experimental pipeline: filter design, FDN
//! rendering, EDC/MSS/sparsity losses with reverse-mode gradients, loss
//! profiles under background noise and parameter perturbation, and an
//! Adam-based optimisation study.

pub mod attenuation;
pub mod dsp;
pub mod error;
pub mod fdn;
mod fft;
pub mod grad;
pub mod harness;
pub mod io;
pub mod landscape;
pub mod linalg;
pub mod losses;
pub mod presets;
pub mod seeds;

pub use error::{Error, Result};
