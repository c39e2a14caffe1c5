//! Probing patch-based forecasting transformers for linearly encoded
//! frequency information.
//!
//! The crate bundles the pieces of that workflow:
//!
//! - [`signal`]: controlled sinusoid datasets, band tasks and spectral predictability.
//! - [`store`]: the little-endian `FQPB` container for activations, erasers and datasets.
//! - [`model`]: a desk-scale patch encoder/decoder forecaster with five probe taps.
//! - [`probe`]: prequential MDL linear probes and Space Saving.
//! - [`eraser`]: closed-form least-squares concept erasure and sequential fitting.
//! - [`spectral`]: dominant frequency, spectral RMSE and the paired Wilcoxon test.
//! - [`experiment`]: the `freqprobe` pipeline driven by a JSON config.

pub mod eraser;
pub mod error;
pub mod experiment;
pub mod model;
mod optim;
pub mod probe;
pub mod rng;
pub mod signal;
pub mod spectral;
pub mod store;

pub use error::{Error, Result};
