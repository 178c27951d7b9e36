//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, stream)`, so
//! chains and stages never share state and results do not depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream identifiers for the independent consumers of a run seed.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SCORE_INIT: u64 = 3;
    pub const SCORE_TRAIN: u64 = 4;
    pub const DETECTOR: u64 = 5;
    pub const DISC_INIT: u64 = 6;
    pub const DISC_TRAIN: u64 = 7;
    pub const DISC_SPLIT: u64 = 8;
    pub const CHAIN_LABELS: u64 = 9;
    /// Sampling chains use `CHAIN_BASE + chain_index`.
    pub const CHAIN_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn chain_stream(seed: u64, chain: usize) -> LabRng {
    stream(seed, streams::CHAIN_BASE + chain as u64)
}
