//! Seed-space optimisation through unrolled diffusion samplers for imaging
//! inverse problems.

pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod es;
pub mod experiments;
pub mod fixtures;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod operators;
pub mod optim;
pub mod prior;
pub mod reverse;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
