//! Ultrasound image reconstruction by direct inversion of a physical
//! measurement model.

pub mod acquisition;
pub mod beamform;
pub mod error;
pub mod forward;
pub mod grad;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod red;
pub mod reparam;
pub mod render;

pub use error::{Error, Result};
