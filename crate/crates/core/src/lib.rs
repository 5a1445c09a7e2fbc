pub mod error;
pub mod audio;
pub mod numerics;

pub use error::{Error, Result};
pub mod model;
pub mod vq;
pub mod seed;
pub mod trainer;
pub mod lexicon;
pub mod experiments;
pub mod cli;
