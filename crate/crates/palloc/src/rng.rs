//! Reproducible named random-number streams.
//!
//! One root seed is split into independent ChaCha12 streams, one per random
//! ingredient of a simulation (inter-arrivals, service, routing choice,
//! tie-breaks). Keeping the ingredients on separate streams means policy
//! variants can be compared under common random numbers.
//!
//! Reproduction notes for other implementations: the stream with id `k` is
//! ChaCha12 keyed with the 32-byte seed whose first 8 bytes are the root
//! seed (little endian), bytes 8..16 are `k` (little endian), and the rest
//! are zero. A uniform draw takes the top 53 bits of the next 64-bit output:
//! `u = (next_u64() >> 11) / 2^53`. Exponentials use the inverse transform
//! `-ln(1 - u) / rate`.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream identifiers, fixed so that output is stable across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    InterArrival = 0,
    Service = 1,
    Routing = 2,
    TieBreak = 3,
}

/// A single named random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha12Rng,
}

impl Stream {
    pub fn new(root_seed: u64, id: StreamId) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&root_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&(id as u64).to_le_bytes());
        Self {
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Exponential draw by inverse transform.
    pub fn exp(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }
}
