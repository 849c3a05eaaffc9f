//! Bimodal preset/spectrogram VAE for synthesizer preset interpolation,
//! together with the FM synthesizer it is trained against and the
//! interpolation evaluation pipeline.

pub mod corpus;
pub mod dlm;
pub mod error;
pub mod interp;
pub mod model;
pub mod parallel;
pub mod prior;
pub mod report;
pub mod schema;
pub mod spectrum;
pub mod stats;
pub mod synth;
pub mod timbre;
pub mod train;

pub use error::{Error, Result};
