//! Deterministic seed derivation.
//!
//! Every stochastic stage derives its own ChaCha stream from the master seed
//! plus a purpose tag, so reordering or parallelizing stages never changes
//! the draws any one stage sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed, a purpose tag, and indices.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0xff]);
    h.update(tag.as_bytes());
    for ix in indices {
        h.update([0xfe]);
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seeded RNG for a derived stream.
pub fn stream(master: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}
