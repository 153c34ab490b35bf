//! Deterministic, keyed random number streams.
//!
//! Every random draw in the crate comes from a [`StreamRng`] derived from a
//! master seed plus a purpose label and integer coordinates (epoch, batch,
//! sample index, ...). Streams are independent of iteration order and thread
//! scheduling, so any computation keyed the same way reproduces bit-identical
//! draws.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes; stable across platforms and releases, unlike
/// `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `(seed, purpose, coordinates...)`.
pub type StreamRng = ChaCha8Rng;

/// Derive an independent stream for a purpose label and integer coordinates.
pub fn stream(seed: u64, purpose: &str, coords: &[u64]) -> StreamRng {
    let mut state = splitmix64(seed ^ fnv1a64(purpose.as_bytes()));
    for &c in coords {
        state = splitmix64(state ^ splitmix64(c.wrapping_add(0x517cc1b727220a95)));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draw helper (Box-Muller free: uses rand_distr's ziggurat).
pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Fill a buffer with i.i.d. standard-normal draws.
pub fn fill_normal(rng: &mut StreamRng, buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = normal(rng);
    }
}
