//! Content hashing and per-item seed derivation.
//!
//! Every random choice in the pipeline is keyed by a seed derived from the
//! run seed and the identity of the item being processed, never from shared
//! RNG state, so results do not depend on worker scheduling.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes a sequence of labelled parts into 64 bits.
///
/// Parts are length-prefixed so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn hash_str(s: &str) -> u64 {
    hash_parts(&[s.as_bytes()])
}

/// Derives a child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    hash_parts(&[&seed.to_le_bytes(), tag.as_bytes()])
}

pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    hash_parts(&[&seed.to_le_bytes(), tag.as_bytes(), &index.to_le_bytes()])
}
