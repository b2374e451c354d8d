//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so changing how much one component samples never shifts the
//! draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. The task index is added to the per-task streams.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const PATIENT_DEDUP: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const HEAD_EXPANSION: u64 = 1 << 16;
    pub const BATCH_ORDER: u64 = 2 << 16;
    pub const REPLAY_DRAW: u64 = 3 << 16;
    pub const BUFFER_UPDATE: u64 = 4 << 16;
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
