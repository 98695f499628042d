//! Seeded substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! trial seed, with the stream id split into a purpose tag and an index. Two
//! draws with different purposes or indices never share a keystream, so the
//! order in which parallel workers run cannot change any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    DirectChannel = 1,
    ReflectChannel = 2,
    BsRisChannel = 3,
    PhaseNoise = 4,
    Signal = 5,
    Init = 6,
    Instance = 7,
}

/// Generator for `(seed, purpose, index)`. The index must fit in 48 bits.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1u64 << 48));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1u64 << 48) - 1)));
    rng
}
