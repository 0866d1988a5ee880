//! Gated fusion of independently trained single-stage object detectors.

pub mod cli;
pub mod config;
pub mod container;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gating;
pub mod infer;
pub mod geometry;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
