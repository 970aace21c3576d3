//! Named, seeded random substreams.
//!
//! All randomness in the pipeline flows from one root seed. Each stage (data
//! generation, text training, diffusion training, sampling, probes) draws
//! from its own substream, derived by hashing the root seed with a stream
//! name and an integer salt. Stages can therefore be re-run independently
//! and still reproduce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `(root_seed, name, salt)`.
///
/// Different names or salts give statistically independent streams; the same
/// triple always gives the same stream.
pub fn substream(root_seed: u64, name: &str, salt: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(salt.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Collapse `(root_seed, name, salt)` to a single u64, for operations that
/// take a plain integer seed.
pub fn subseed(root_seed: u64, name: &str, salt: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0x2f]);
    hasher.update(name.as_bytes());
    hasher.update([0x2f]);
    hasher.update(salt.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
