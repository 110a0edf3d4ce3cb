//! Deterministic seed derivation.
//!
//! Every random stream in the toolkit is derived from a master seed plus a
//! label and an index, so parallel workers never share a generator and the
//! order in which work items run never changes a result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `(parent, label, index)`.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A generator seeded from `(parent, label, index)`.
pub fn rng_for(parent: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label, index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
