//! Seeding. Every random stream is a `Pcg64Mcg` (128-bit MCG state, 64-bit
//! output) seeded from a 64-bit value mixed with SplitMix64, so sub-streams
//! derived from the same run seed are independent and stable across builds.

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

pub type Rng = Pcg64Mcg;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

/// FNV-1a; used to key parameter init streams by name.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn rng(seed: u64) -> Rng {
    Pcg64Mcg::seed_from_u64(splitmix64(seed))
}

pub fn stream(base: u64, stream: &[u64]) -> Rng {
    rng(derive_seed(base, stream))
}
