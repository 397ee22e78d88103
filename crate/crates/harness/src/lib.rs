//! Experiments around class-aware regularization on a synthetic dataset
//! with biased class co-occurrence: data generation, training runs, mIOU,
//! class dependency and pixel relation maps, and the `card` command line.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod maps;
pub mod metrics;
pub mod pnm;
pub mod run;

pub use error::{Error, Result};
