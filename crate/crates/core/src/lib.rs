pub mod bbox;
pub mod camera;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod isp;
pub mod metrics;
pub mod optics;
pub mod scene;
pub mod sensor;
pub mod sif;
pub mod spectral;
pub mod spm;

pub use error::{Error, Result};
