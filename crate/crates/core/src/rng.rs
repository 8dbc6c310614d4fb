//! Seed derivation. Every stochastic component takes an explicit u64 seed and
//! derives independent substreams with [`derive_seed`], so experiment results
//! are a pure function of the configured seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a substream seed from a base seed and a tag path. Tags identify the
/// consumer ("train", epoch index, sample index, ...); distinct paths give
/// statistically independent streams.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base ^ 0x5bf0_3635_d1a4_42f1);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// Hashes a string tag into a u64 for use in a tag path.
pub fn tag(name: &str) -> u64 {
    // FNV-1a, enough to separate the handful of fixed labels used internally.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The crate-standard RNG: small, fast, seedable, identical across platforms.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
