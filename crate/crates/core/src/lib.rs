//! Spatial-cluster grid encoding and attention-based 3D CNN for interictal
//! spike detection in multichannel MEG/EEG.

pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod preprocess;
pub mod recording;
pub mod seed;
pub mod spatial;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
