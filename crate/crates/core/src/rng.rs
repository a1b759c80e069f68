//! Deterministic seeding.
//!
//! Every random stream in a run is a ChaCha8 stream keyed by the master seed
//! and a stream id, so any stream can be rebuilt without replaying others.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const BYZANTINE: u64 = 2;
    pub const DATA: u64 = 3;
    pub const TARGETS: u64 = 4;
    pub const EVAL_AGENT: u64 = 5;
    pub const EDGES: u64 = 6;
    pub const INIT: u64 = 7;
    pub const COPY_TARGET: u64 = 8;
    /// Agent `i` samples from stream `AGENT_BASE + i`.
    pub const AGENT_BASE: u64 = 1 << 20;
}

/// RNG for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A 64-bit seed derived from `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}
