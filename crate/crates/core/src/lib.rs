//! Two-block interactive 3-D nodule segmentation: volume grids, attraction
//! fields, losses, metrics, the network, training and synthetic data.

pub mod error;
pub mod experiment;
pub mod field;
pub mod interact;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;
pub mod volgrid;

pub use error::{Error, Result};
