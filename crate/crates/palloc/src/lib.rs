//! Parallel-server queueing systems under probabilistic allocation policies.
//!
//! An arriving job is sent to the i-th shortest queue with probability `p_i`
//! (ties shared uniformly). The crate certifies which allocation vectors keep
//! the system stable on the whole interval `rho < 1`, computes critical
//! traffic intensities for error-prone routing, solves truncated versions of
//! the ordered queue-length chain exactly, and simulates sample paths for
//! both queue-length-based and workload-based variants.

pub mod analytics;
pub mod ctmc;
pub mod desim;
pub mod error;
pub mod experiments;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
pub use policy::{AllocationVector, OrderComparison, SystemParams};
