//! Keyed random streams.
//!
//! Every consumer of randomness (data generation, initialization, shuffling)
//! draws from its own ChaCha stream selected by a purpose tag, so changing
//! how much randomness one consumer uses never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, tag, index)`. The seed keys the ChaCha state and the
/// tag/index pair selects the stream id.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(fnv1a(tag.as_bytes()) ^ splitmix(index)));
    rng
}

/// Stable 64-bit mix of an integer, used for hash-based splits.
pub fn mix(seed: u64, value: u64) -> u64 {
    splitmix(seed ^ splitmix(value))
}
