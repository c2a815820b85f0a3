//! Named, independent random streams.
//!
//! Every consumer derives its own generator from `(seed, purpose, a, b)` so
//! that switching an ablation on or off never shifts the draws another
//! component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const UNIVERSE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN_EPISODES: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const QUERY_ROTATION: u64 = 6;
    pub const QUERY_BLEND: u64 = 7;
    pub const NEG_SUPPORT: u64 = 8;
    pub const EVAL_EPISODES: u64 = 9;
    pub const PROJECTION: u64 = 10;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    let mut bytes = [0u8; 32];
    for (chunk, word) in bytes.chunks_mut(8).zip([purpose, a, b, 0x5EED]) {
        h = splitmix64(h ^ word);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
