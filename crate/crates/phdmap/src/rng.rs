//! Deterministic RNG stream derivation.
//!
//! Every stochastic stage draws from its own ChaCha stream derived from the
//! master seed, a stage tag and the frame index, so runs are reproducible
//! bit-for-bit regardless of which stages execute.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags for stream derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Render,
    Predict,
    Birth,
    Resample,
    Matching,
    Test,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Render => 0x52454e44,
            Stream::Predict => 0x50524544,
            Stream::Birth => 0x42495254,
            Stream::Resample => 0x52534d50,
            Stream::Matching => 0x4d415443,
            Stream::Test => 0x54455354,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives the RNG for `(seed, stream, step)`.
pub fn derive(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ stream.tag()).wrapping_add(step));
    ChaCha8Rng::seed_from_u64(mixed)
}
