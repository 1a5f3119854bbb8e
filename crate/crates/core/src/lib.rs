//! Learning-oriented uplink power allocation for edge data collection.
//!
//! Devices upload training samples to edge nodes over an interference-limited
//! uplink. The allocators in this crate choose transmit powers so that the
//! collected sample count approaches each node's dataset target.

pub mod allocator;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod fedsim;
pub mod fom;
pub mod lossmodel;
pub mod mm;
pub mod problem;
pub mod projection;

pub use error::{Error, Result};
pub use problem::AllocationProblem;
