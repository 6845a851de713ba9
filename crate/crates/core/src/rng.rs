//! Deterministic RNG streams keyed by tuples such as (seed, step, sample).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5151_C11F_0000_0001, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Labels for independent streams drawn from the same run seed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCH_ORDER: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const NEGATIVES: u64 = 4;
    pub const TEACHER_INIT: u64 = 5;
    pub const PROBE: u64 = 6;
}
