//! Time-aware conversion prediction over user activity trails.
//!
//! The crate bundles a small reverse-mode autodiff engine, the time-gated
//! recurrent attention model and four sequence baselines, a data pipeline for
//! click/buy logs and synthetic trails, a training loop, and evaluation
//! metrics.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
