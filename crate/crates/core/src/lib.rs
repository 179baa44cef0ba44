//! Discriminative pre-training over student interaction sequences.

pub mod dataio;
pub mod dpa;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod favor;
pub mod numcore;
pub mod parallel;

pub use error::{Error, Result};
