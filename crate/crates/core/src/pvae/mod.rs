//! Physics-informed variational autoencoder over sets of multiplexed measurements.

mod model;
mod sample;
mod train;

pub use model::*;
pub use sample::*;
pub use train::*;
