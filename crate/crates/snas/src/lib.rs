//! Desk-scale stochastic neural architecture search.
//!
//! Joint training of operation parameters and architecture-distribution
//! parameters by back-propagating one generic loss through sampled DAG cells,
//! with closed-form cross-checks for every gradient and credit formula.

pub mod arch;
pub mod baselines;
pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod credit;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod resource;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
