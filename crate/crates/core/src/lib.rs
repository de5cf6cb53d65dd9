//! Arbitrary conditional density estimation with energy-based one-dimensional
//! conditionals and learned mixture proposals.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod eval;
pub mod inference;
pub mod masking;
pub mod math;
pub mod model;
pub mod nn;
pub mod proposal;
pub mod rng;
pub mod schema;
pub mod training;

pub use error::{AceError, Result};
