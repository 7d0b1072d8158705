//! Seed derivation so every stochastic step is reproducible from one base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the pipeline.
pub type PipelineRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> PipelineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed for item `index` of the stream named `label`.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut label_hash = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        label_hash ^= u64::from(b);
        label_hash = label_hash.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(base ^ label_hash).wrapping_add(index))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}
