//! Face-swapping generator built from an attribute encoder, a cross-attention style blending
//! module and a style-modulated decoder, together with its multi-scale critic, training
//! objective and trainer.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod extractors;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod sbm;
pub mod selfcheck;
pub mod trainer;
pub mod types;

#[cfg(test)]
mod testutil;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::FaceSwapModel;
