pub mod artifact;
pub mod checkpoint;
pub mod data_synth;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod lexicon;
pub mod losses;
pub mod manifest;
pub mod masking;
pub mod model;
pub mod pseudo_codes;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use autograd;
pub use error::{Error, Result};
