pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod similarity;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
