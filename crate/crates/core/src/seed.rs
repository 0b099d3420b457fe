//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (generator, shuffler, random client, ...)
//! derives its own ChaCha stream from `(seed, stream, key)`, so components
//! can be re-seeded independently and results do not depend on call order
//! or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const STREAM_GENERATOR: &str = "generator";
pub const STREAM_SHUFFLER: &str = "shuffler";
pub const STREAM_SAMPLER: &str = "sampler";
pub const STREAM_RANDOM_CLIENT: &str = "random-client";
pub const STREAM_SYNTH: &str = "synth";

/// Derives a 32-byte seed for `(seed, stream, key)`.
pub fn derive(seed: u64, stream: &str, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    h.finalize().into()
}

pub fn rng(seed: u64, stream: &str, key: &str) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive(seed, stream, key))
}
