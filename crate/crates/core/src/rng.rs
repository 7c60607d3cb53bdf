//! Named RNG streams split from a single master seed.
//!
//! Every consumer of randomness (weight init, batch shuffling, Langevin noise,
//! data generation) draws from its own stream so that changing how much one
//! consumer draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "batch-shuffle";
pub const NOISE: &str = "langevin-noise";
pub const DATA: &str = "data-generation";

/// Derive an independent stream for `name` from `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha20Rng::from_seed(digest)
}

/// Sub-stream of a named stream, e.g. one per class or per cell.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    stream(seed, &format!("{name}/{index}"))
}
