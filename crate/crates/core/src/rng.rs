//! Seeded RNG streams.
//!
//! Every random decision in the simulator draws from a stream derived from
//! `(master seed, label, index)`. Streams are independent of each other and
//! of iteration order, so clients can be visited in any order (or in
//! parallel) without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent ChaCha8 stream for `(master, label, idx)`.
pub fn derive_rng(master: u64, label: &str, idx: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(idx.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Stream keyed by two indices (e.g. client id and round).
pub fn derive_rng2(master: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    derive_rng(master, label, a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b)
}
