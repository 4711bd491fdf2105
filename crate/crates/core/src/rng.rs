//! Counter-derived random streams.
//!
//! Every stream is a pure function of a seed and a draw counter, so the only
//! state that needs checkpointing is a pair of integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of integers into one well-mixed seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_C0E0_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// A seeded stream whose n-th generator depends only on `(seed, salt, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
    pub salt: u64,
    pub counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64, salt: u64) -> Self {
        Self {
            seed,
            salt,
            counter: 0,
        }
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = rng_from(&[self.seed, self.salt, self.counter]);
        self.counter += 1;
        rng
    }
}
