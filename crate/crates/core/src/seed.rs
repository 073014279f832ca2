//! Independent random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, so that e.g. the curriculum ordering and batch shuffles of the
/// same run never share a stream.
pub mod stream {
    pub const SCENE: u64 = 1;
    pub const CURRICULUM_ORDER: u64 = 2;
    pub const EPOCH_SHUFFLE: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream tag and an index into a new seed.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
