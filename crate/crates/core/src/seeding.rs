//! Deterministic seed derivation. Every random stream in a run descends from
//! the single root seed through these helpers, so results do not depend on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a named phase, e.g. `derive(root, "grow", 2)`.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(root);
    for b in label.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`, e.g. one per source context.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
