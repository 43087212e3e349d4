//! Seeded RNG streams.
//!
//! Every source of randomness in a run is derived from one user-facing seed
//! through a named ChaCha stream, so weight init, dropout, batch sampling and
//! data synthesis stay independent of each other and reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
pub const STREAM_SAMPLING: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;

/// RNG for one named stream of a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// First u64 of a named stream, for ops that take a plain seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).gen()
}
