//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by a base seed and a list of integer tags, so results never depend
//! on scheduling or on how many sibling tasks exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`. Distinct tag lists give unrelated seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(base);
    for &t in tags {
        s = splitmix(s ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
