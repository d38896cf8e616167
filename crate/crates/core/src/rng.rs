//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from a xoshiro256** generator. A
//! stream is identified by the run seed plus a purpose tag and up to two
//! indices (typically epoch and sample index), so any sub-stream can be
//! re-created independently of how many draws other streams consumed. This is
//! what makes augmentation parallelizable and training resumable.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Stream = Xoshiro256StarStar;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sampler = 2,
    Augment = 3,
    Noise = 4,
    Synth = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream coordinates into a single 64-bit seed.
pub fn derive_seed(seed: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, purpose, a, b))
}
