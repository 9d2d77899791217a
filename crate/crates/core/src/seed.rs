//! Seed derivation.
//!
//! Child seeds are derived from a parent and a list of coordinates by folding
//! each coordinate through the SplitMix64 finaliser. A child seed depends only
//! on its own coordinates, so adding cells to a grid never perturbs the seeds
//! of existing cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `derive(s, [a, b]) = splitmix(splitmix(s ^ splitmix(a)) ^ splitmix(b))`.
pub fn derive(parent: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(parent, |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// Shorthand for seeding the crate's RNG from derived coordinates.
pub fn rng(parent: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parent, coords))
}
