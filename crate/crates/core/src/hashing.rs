//! Stable hashing used for cache keys, split sampling, and simulated draws.
//!
//! Everything that must reproduce byte-identically across runs, platforms,
//! and releases goes through SHA-256 rather than `std::hash` or an RNG
//! library whose stream could change between versions.

use sha2::{Digest, Sha256};

/// SHA-256 over length-prefixed parts, so `["ab","c"]` and `["a","bc"]`
/// never collide.
pub fn stable_digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// First eight digest bytes as a big-endian u64.
pub fn stable_u64(parts: &[&[u8]]) -> u64 {
    let digest = stable_digest(parts);
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Uniform draw in [0, 1) with 53 bits of entropy.
pub fn stable_u01(parts: &[&[u8]]) -> f64 {
    (stable_u64(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Hex digest for file-system cache keys.
pub fn hex_digest(parts: &[&[u8]]) -> String {
    hex::encode(stable_digest(parts))
}
