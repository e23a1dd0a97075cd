//! Seed derivation. Every random quantity is drawn from a ChaCha stream keyed
//! by (master seed, purpose tag, index), so results do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    rng.set_stream(index);
    rng
}

// purpose tags
pub const TAG_PROBE: u64 = 1;
pub const TAG_KPROBE: u64 = 2;
pub const TAG_SAMPLE: u64 = 3;
pub const TAG_PRIOR: u64 = 4;
pub const TAG_NOISE: u64 = 5;
pub const TAG_SPLIT: u64 = 6;
pub const TAG_GIBBS: u64 = 7;
