//! Seed derivation.
//!
//! Every random quantity in a run is drawn from a ChaCha stream whose seed is
//! derived from a master seed by hashing a stage label and an index. Streams
//! for different labels or indices are unrelated, which keeps grid points and
//! shards independent of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha12Rng;

/// Derives a child seed from `(parent, label, index)`.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// RNG for shard `shard` of a sharded draw seeded with `seed`.
pub fn shard_rng(seed: u64, shard: usize) -> Rng {
    rng_from(derive_seed(seed, "shard", shard as u64))
}

/// splitmix64 finalizer; used for hashing lattice cells into field values.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
