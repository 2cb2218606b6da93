//! Exponential logarithmic losses for highly unbalanced 3D segmentation, a
//! skip-connected, deeply supervised encoder-decoder, and the surrounding
//! data, augmentation, optimization and experiment tooling.

pub mod augment;
pub mod dataio;
pub mod elnet;
pub mod error;
pub mod losses;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod volgrad;

pub use error::{Error, MvolError, Result};
