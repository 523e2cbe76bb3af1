//! Replayable randomness keyed by `(run seed, stream id)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Returns a deterministic stream for `(seed, stream_id)`.
///
/// The key is a SHA-256 digest of both inputs, so streams are stable across
/// platforms and releases, and distinct ids give unrelated streams.
pub fn seeded_rng(seed: u64, stream_id: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Seed handed to a backend for the `branch`-th sibling sample of a request.
///
/// Siblings drawn from the same history get consecutive seeds so scripted
/// backends can index their variants by position.
pub fn branch_seed(run_seed: u64, branch: usize) -> u64 {
    run_seed.wrapping_add(branch as u64)
}
