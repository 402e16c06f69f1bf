//! Detached skip fusion for vision encoders, with pathwise gradient
//! diagnostics, analytic sanity checks and a reconstruction probe.

pub mod autograd;
pub mod emit;
pub mod error;
pub mod fusion;
pub mod glyph;
pub mod nn;
pub mod pathwise;
pub mod recon;
pub mod runlab;
pub mod theory;

pub use error::{Error, Result};
