//! Ground-to-drone herbage biomass estimation.
//!
//! Pipeline stages, in order:
//!
//! 1. [`data_model`]: manifests, labels, synthetic fixtures.
//! 2. [`elevation`]: relative drone altitude from GPS and terrain elevation.
//! 3. [`geometry`]: altitude-adjusted crops, upscaled to the translation size.
//! 4. [`cut`]: contrastive unpaired translation of drone crops toward the
//!    ground-level domain.
//! 5. [`regressor`] and [`ssl`]: the biomass regressor and its
//!    semi-supervised trainer.
//! 6. [`metrics`]: HRMSE, HRE, height error, composition RMSE, sharpness,
//!    crop aggregation.
//!
//! [`cli`] wires the stages into the `herbage` binary.

pub mod checkpoint;
pub mod cli;
pub mod cut;
pub mod data_model;
pub mod elevation;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod regressor;
pub mod ssl;

pub use error::{Error, Result};
