//! Simulation, reconstruction and evaluation for multiplexed LED-array
//! microscopy, including a physics-informed variational autoencoder that
//! reconstructs a whole set of objects from a few measurements each.
//!
//! The physics lives in [`optics`]; [`recon`] fits one object at a time by
//! maximum likelihood, [`pvae`] trains an encoder/decoder jointly over a
//! dataset, and [`eval`] scores either against ground truth.

pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod illum;
pub mod optics;
pub mod phantom;
pub mod pipeline;
pub mod eval;
pub mod poisson;
pub mod pvae;
pub mod recon;
pub mod rng;

pub use config::OpticalConfig;
pub use error::{CoreError, ErrorClass, Result};
pub use optics::{ObjectModel, Optics};
