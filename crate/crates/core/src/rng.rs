//! Project-wide deterministic randomness.
//!
//! Every consumer (parameter init, epoch shuffling, data splitting, synthetic
//! generators, hyperparameter search) draws from its own ChaCha8 stream derived
//! from `(seed, purpose, index)`. ChaCha is counter based and its output is
//! specified bit-for-bit, so trajectories reproduce across platforms and
//! consumers never interleave.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Who is consuming a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Split = 3,
    Generate = 4,
    Search = 5,
    Bench = 6,
}

/// Returns the generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}
