//! Seeded random substreams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! and a stream name, so adding a consumer never perturbs another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for the named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Substream indexed by an integer, e.g. one per fold.
pub fn indexed_substream(seed: u64, name: &str, index: usize) -> StreamRng {
    substream(seed, &format!("{name}#{index}"))
}
