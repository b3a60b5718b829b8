//! Particle-filter Bayesian estimation with trainable measurement strategies
//! for simulated quantum sensors.

pub mod agents;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod fisher;
pub mod models;
pub mod particle_filter;
pub mod precision;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
