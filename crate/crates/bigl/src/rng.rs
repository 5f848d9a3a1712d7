//! Deterministic random-number streams.
//!
//! Every consumer of randomness derives its own stream from the experiment
//! root seed plus a purpose label, so adding or removing one consumer never
//! shifts the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a root seed, a purpose label, and an index
/// (epoch, case number, ...). Identical arguments always yield the identical
/// stream.
pub fn stream(root_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root_seed.to_le_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}
