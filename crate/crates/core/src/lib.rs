pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heatmap;
pub mod lesion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{CimKeys, FusionMode, ModelConfig, NormMode, Task};
pub use error::{Error, Result};
