//! Forward modelling, synthetic data, learned and classical reconstruction and
//! image-quality metrics for planar electrical capacitance tomography.

pub mod dataset;
pub mod error;
pub mod fem;
pub mod image;
pub mod inverse;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod phantom;

pub use error::{Error, Result};
