//! Seed derivation. Every random quantity comes from a ChaCha8 generator keyed
//! by `master_seed + object_index` on a stream reserved for its purpose, so
//! adding a new consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Phantom = 0,
    Patterns = 1,
    Noise = 2,
    Training = 3,
    Sampling = 4,
    Init = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

pub fn object_rng(master: u64, index: usize, stream: Stream) -> ChaCha8Rng {
    stream_rng(master.wrapping_add(index as u64), stream)
}
