//! Deterministic derivation of independent random streams from one experiment seed.
//!
//! Every source of randomness in a run (client sampling, dataset noise, dropout,
//! defense noise, shadow re-initialization, ...) draws from its own stream,
//! addressed by a tag path. Streams are independent of the order in which other
//! streams are consumed, which is what makes e.g. a shadow-learning run keep a
//! bit-identical backbone trajectory to a no-defense run under the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream tags. Kept in one place so call sites cannot collide.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const CLIENT_SAMPLING: u64 = 3;
    pub const ADVERSARY: u64 = 4;
    pub const LOCAL_TRAINING: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const DEFENSE_NOISE: u64 = 7;
    pub const SHADOW_INIT: u64 = 8;
    pub const DROPOUT: u64 = 9;
    pub const TRIGGER: u64 = 10;
    pub const DRIFT: u64 = 11;
    pub const UPLOAD_NOISE: u64 = 12;
    pub const TEST_SET: u64 = 13;
    pub const VERIFY: u64 = 14;
    pub const MALICIOUS_POOL: u64 = 15;
}

/// SplitMix64 finalizer; good avalanche for tag mixing.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Collapse a seed plus a tag path into a single stream key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut state = mix64(seed ^ 0x53545245414d30); // "STREAM0"
    for &t in path {
        state = mix64(state ^ t);
    }
    state
}

/// A fresh, independent RNG for the given tag path.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}

/// FNV-1a over bytes; used for config digests and sweep seed derivation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
