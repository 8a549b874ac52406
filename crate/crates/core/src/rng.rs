//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent substream `id` of the generator seeded by `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream ids used across the crate, kept apart so that adding draws to one
/// consumer never shifts another.
pub mod ids {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const VALIDATION_MASK: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const HEAD_INIT: u64 = 6;
    pub const VEHICLE_BASE: u64 = 1 << 32;
}
