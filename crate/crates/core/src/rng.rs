//! Deterministic random streams.
//!
//! Every source of randomness in the crate flows from one top-level `u64`
//! seed through `derive_rng(seed, tag)`: the seed's little-endian bytes and a
//! purpose tag are hashed with SHA-256 and the digest keys a ChaCha12 stream.
//! Distinct tags give independent streams, so adding a consumer (say, an
//! extra evaluation pass) never shifts the draws seen by existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Stream for one purpose. Tags are short path-like strings such as
/// `"collect/ep3"` or `"policy/init"`.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Sub-seed for handing to a component that derives its own streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
