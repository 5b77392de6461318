//! Seeded RNG streams.
//!
//! Every random draw in a run comes from a stream derived from the experiment
//! seed and a tuple of labels, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream purposes. Distinct tags keep streams independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Corpus = 1,
    Split = 2,
    Partition = 3,
    Init = 4,
    Client = 5,
    Validation = 6,
}

/// Stream for `(seed, purpose, a, b)`, e.g. `(seed, Client, client_id, round)`.
pub fn derive(seed: u64, purpose: Stream, a: u64, b: u64) -> Rng {
    let mut h = splitmix64(seed);
    for word in [purpose as u64, a, b] {
        h = splitmix64(h ^ word);
    }
    seeded(h)
}
