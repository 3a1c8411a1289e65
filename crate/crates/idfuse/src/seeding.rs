//! Deterministic randomness plumbing.
//!
//! Every random draw in the project flows from one top-level `u64` seed
//! through `(seed, purpose label, index)`. The derived generator is ChaCha12
//! keyed with `SHA-256(seed_le || label || index_le)`, so subsystems are
//! reproducible in isolation and reordering one consumer never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The project-wide RNG: ChaCha12, seeded as documented above.
pub type Rng = ChaCha12Rng;

pub fn derive_rng(seed: u64, label: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
