//! Seed derivation. Every random stream is a pure function of the global seed and a
//! few integer coordinates, so worker count and call order never change results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stream tags keep independent uses of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Probe = 4,
    Synthetic = 5,
    Eval = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, coords))
}

/// Normal(0, std) truncated to +-2 std by resampling.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
