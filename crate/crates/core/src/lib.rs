//! Dual self-distillation for U-shaped 3D segmentation networks.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod plot;
pub mod trainer;
pub mod verify;
pub mod volume;

pub use config::{AblationMode, DsdConfig};
pub use error::{Error, Result};
