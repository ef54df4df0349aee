//! Frequency-domain attention and spectral band mixing for few-shot
//! one-class domain adaptation of presentation attack detectors.

pub mod config;
pub mod datagen;
pub mod error;
pub mod fam;
pub mod fmm;
mod linalg;
pub mod netcore;
pub mod pgm;
pub mod plane;
pub mod protocol;
pub mod rng;
pub mod spectral;
pub mod tensorcore;

pub use error::{Error, Result};
pub use plane::{Image, Plane};
