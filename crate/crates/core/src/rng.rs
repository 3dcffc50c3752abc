//! Named random sub-streams.
//!
//! Every consumer of randomness derives its generator from a single root seed
//! plus a stream name. The generator is ChaCha8 seeded with the root seed, with
//! the ChaCha stream id set to the 64-bit FNV-1a hash of the name. Adding a new
//! named consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Uniform draw in `[-scale, scale)` rounded to `f32`.
pub fn uniform_f32(rng: &mut ChaCha8Rng, scale: f32) -> f32 {
    use rand::RngCore;
    // 24 random mantissa bits give an exactly representable f32 in [0, 1).
    let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
    (2.0 * unit - 1.0) * scale
}
