//! Pathology-specific imaging contrast (PSIC) from diffusion MRI.
//!
//! The crate is organised bottom-up:
//!
//! * [`sh`]: real symmetric spherical harmonics, least-squares fitting and
//!   zonal spherical convolution.
//! * [`dcnn`]: the composite spatial-spherical convolution network with exact
//!   forward and backward passes.
//! * [`training`]: dataset splitting, cross-entropy, Adam and the epoch loop.
//! * [`dti`]: single-tensor fitting and the eight scalar diffusion metrics.
//! * [`classify`]: median-PSIC rule, Gaussian likelihood-ratio and logistic
//!   classifiers, ROC/AUC and leave-one-out cross-validation.
//! * [`phantom`]: synthetic two-class multi-tensor cohorts.
//! * [`io`]: binary containers, model files, diffusion-cube extraction and
//!   PSIC export.
//! * [`pipeline`]: the end-to-end comparison used by the `evaluate` command.

pub mod classify;
pub mod dcnn;
pub mod dti;
pub mod error;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod sh;
pub mod training;

pub use error::{Error, Result};
