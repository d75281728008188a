//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by
//! `(seed, stream, index)`. The 256-bit ChaCha key is four successive
//! SplitMix64 outputs over `seed ^ stream·K1 ^ index·K2`, so any frame can be
//! regenerated without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const RENDER: u64 = 2;
    pub const LABEL_FLIP: u64 = 3;
    pub const GNSS: u64 = 4;
    pub const ODOMETRY: u64 = 5;
}

const K1: u64 = 0x9E37_79B9_7F4A_7C15;
const K2: u64 = 0xD1B5_4A32_D192_ED03;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(K1);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut s = seed ^ stream.wrapping_mul(K1) ^ index.wrapping_mul(K2);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
