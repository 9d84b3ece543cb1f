//! Named random sub-streams derived from one run seed.
//!
//! Every consumer of randomness (initialization, augmentation, synthetic
//! data, per-sample work) draws from its own stream, so enabling or skipping
//! one stage never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic generator for `label` under `seed`.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}
