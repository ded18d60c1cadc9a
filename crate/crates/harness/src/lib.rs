//! Command-line harness for misaligned infrared/visible registration and
//! fusion: configuration, synthetic datasets, training, checkpoints,
//! evaluation reports and error maps.

pub mod config;
pub mod dataset;
pub mod error;
pub mod errormap;
pub mod eval;
pub mod model;
pub mod study;
pub mod train;

pub use config::{RunConfig, TrainMode};
pub use dataset::DatasetManifest;
pub use error::{HarnessError, Result};
pub use model::Model;
