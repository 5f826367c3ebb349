//! Disentangled music similarity: stem datasets, pseudo-mixed training pieces,
//! a convolutional encoder with per-condition subspaces, triplet training and
//! nearest-neighbour evaluation.

pub mod audio;
pub mod binfmt;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod hashing;
pub mod models;
pub mod nn;
pub mod objective;
pub mod pseudomix;
pub mod sampling;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
