//! Cycle-consistent stain translation with a domain-shift metric anchored on
//! a frozen segmenter, plus the synthetic data, training and evaluation tools
//! around it.

pub mod cli;
pub mod dsm;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synth;
pub mod training;
pub mod variants;

pub use error::{Error, Result};
