//! Seed derivation helpers.
//!
//! Every stochastic step derives its own seed from a parent seed plus a
//! label or index, so per-item work stays deterministic no matter how the
//! items are scheduled.

use sha2::{Digest, Sha256};

/// splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and one index.
pub fn mix2(seed: u64, a: u64) -> u64 {
    splitmix64(seed ^ splitmix64(a))
}

/// Derives a child seed from a parent seed and two indices.
pub fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(mix2(seed, a) ^ splitmix64(b.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Derives a labeled child seed: first eight bytes of SHA-256(seed || label).
pub fn seed_for(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}
