pub mod bounds;
pub mod dump;
pub mod error;
pub mod heads;
pub mod linalg;
pub mod logistic;
pub mod measures;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
