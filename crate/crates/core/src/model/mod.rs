pub mod config;
pub mod memory;
pub mod ops;
pub mod params;
pub mod unet;

pub use config::{Head, ModelConfig, COND_CHANNELS};
pub use unet::UNet;
