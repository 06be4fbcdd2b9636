//! Named random streams derived from a single experiment seed.
//!
//! Each component draws from its own ChaCha stream so any one of them can be
//! reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const SPLIT: &str = "split";
pub const SYNTH: &str = "synth";
pub const BATCH: &str = "batch";
pub const EVAL: &str = "eval";

pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, name))
}
