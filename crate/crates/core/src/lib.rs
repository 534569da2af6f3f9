//! Co-evolving target and failure agents trained by alternating preference
//! optimization over simulated multi-turn environments.

pub mod analysis;
pub mod coevolve;
pub mod envsim;
pub mod error;
pub mod hashing;
pub mod policy;
pub mod prefdata;
pub mod store;
pub mod training;

pub use error::{Error, Result};
