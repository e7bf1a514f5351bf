//! Named, seedable random streams.
//!
//! Every consumer of randomness (truth perturbation, observation noise,
//! per-model ensemble initialisation) draws from its own ChaCha20 stream whose
//! key is `SHA-256(master_seed || label)`. Streams never share state, so the
//! order in which they are consumed, or the thread that consumes them, does
//! not change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

pub const TRUTH_STREAM: &str = "truth/initial-perturbation";
pub const OBSERVATION_STREAM: &str = "observations/noise";

/// Derives the 32-byte key of the stream `label` under `master_seed`.
pub fn stream_key(master_seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

pub fn stream(master_seed: u64, label: &str) -> StreamRng {
    ChaCha20Rng::from_seed(stream_key(master_seed, label))
}

/// Stream label for the initial ensemble of the model version at `slot`.
pub fn ensemble_stream_label(slot: &str) -> String {
    format!("ensemble-init/{slot}")
}
