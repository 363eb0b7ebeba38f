pub mod checkpoint;
pub mod conditioning;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
