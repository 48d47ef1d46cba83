//! Seed derivation for independent, individually reproducible runs.
//!
//! Every run owns its own ChaCha stream. Child seeds are derived with
//! SplitMix64 applied to `base ^ rotate(stream) ^ index`, so seeds for run
//! `k` never depend on how many runs are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Noise = 2,
    ModelInit = 3,
    EmbeddingInit = 4,
    GridRun = 5,
    TestRun = 6,
    Split = 7,
    Subsample = 8,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `hash(base, stream, index)`.
pub fn derive_seed(base: u64, stream: Stream, index: u64) -> u64 {
    let s = splitmix64(base ^ (stream as u64).rotate_left(32));
    splitmix64(s ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
