//! Seed derivation for reproducible, resumable random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams so that independent consumers never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Corpus = 2,
    Pairs = 3,
    Batch = 4,
    Mask = 5,
    Dropout = 6,
    Probe = 7,
    Eval = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed, a stream tag and a counter (usually the step).
pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ counter)
}

pub fn rng_for(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, counter))
}
