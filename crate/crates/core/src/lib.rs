//! Noise-robust regression: a prototype-based semantic manifold ties features
//! to continuous labels, a feature-label affinity discrepancy ranks samples
//! into clean and noisy subsets, and each subset is trained with its own
//! affinity-alignment objective.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifold;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
