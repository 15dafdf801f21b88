pub mod error;
pub mod extract;
pub mod frame;
pub mod metrics;
pub mod pipeline;
pub mod nn;
pub mod refiner;
pub mod regressor;
pub mod roi;
pub mod spectral;
pub mod synth;

pub use error::{Checkpoint, Error, Result};
