//! Deterministic seeding.
//!
//! Every random stream in the crate comes from a ChaCha8 generator whose seed
//! is derived from a run seed and a component name, so components never share
//! a stream and adding a new consumer does not perturb existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a sub-seed from `(seed, component)`.
pub fn sub_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, component: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, component))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
