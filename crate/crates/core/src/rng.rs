//! Seed derivation so that every random stream in a run is a pure function
//! of the top-level seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_CENTERS: u64 = 3;
pub const STREAM_DATA_CENTERS: u64 = 4;
pub const STREAM_DATA_NOISE: u64 = 5;
pub const STREAM_TRAIN_POOL: u64 = 6;
/// Epoch shuffles use `STREAM_EPOCH_BASE + epoch`.
pub const STREAM_EPOCH_BASE: u64 = 1_000;

/// splitmix64 finalizer; mixes a base seed with a stream tag.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Seeded Fisher-Yates shuffle with a deterministic index stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
