//! Named, indexable random substreams derived from one run seed.
//!
//! Each consumer (data order, initialization, training noise, evaluation)
//! draws from its own stream, and per-step streams are addressed by index,
//! so resuming at step `k` needs nothing but `k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";

/// A generator for `(seed, name, index)`; distinct triples give independent
/// streams.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
