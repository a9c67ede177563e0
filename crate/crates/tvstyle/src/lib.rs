pub mod cli;
pub mod container;
pub mod corpus;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod stylize;
pub mod textcond;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
