//! Dual-intent collaborative filtering trained with alignment and uniformity
//! objectives on the unit hypersphere.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod harness;
pub mod intent;
pub mod losses;
pub mod model;
pub mod rng;
pub mod semantic;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
