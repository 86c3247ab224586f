//! Desk-scale engine for proposal-free instance segmentation.
//!
//! A small fully-convolutional network predicts one real value per pixel; a
//! variational loss (binary separation, pairwise permutation-invariant term,
//! smoothness, quantization) pushes those values onto per-instance plateaus;
//! 1-D mean shift discretizes the plateaus into candidate segments; a light
//! verification head scores and classifies the candidates.  Everything is
//! deterministic given the configured seeds.

pub mod discretize;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod sampling;
mod seedmix;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
