//! Seed derivation.
//!
//! Every random stream is keyed by `(root seed, label, index)`: the first
//! eight bytes of `SHA-256(root_le || label || 0x00 || index_le)` read as a
//! little-endian `u64` seed a ChaCha8 generator. Streams never share state,
//! so work can be reordered or parallelised without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label, index))
}
