//! Rank-based, anytime-valid sequential test of independence.

pub mod aggregate;
pub mod baseline;
pub mod bet;
pub mod calibration;
pub mod derandomize;
pub mod engine;
pub mod error;
pub mod grid;
pub mod rank;
pub mod rng;
pub mod session;
pub mod sim;
pub mod sinkhorn;

pub use error::{Error, Result};
