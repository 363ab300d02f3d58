//! Seeded random streams.
//!
//! Every random decision in the pipeline draws from ChaCha8 (the `rand_chacha`
//! implementation), keyed by the run seed and a fixed stream id per purpose.
//! ChaCha8 output is defined independently of platform and word size, so a
//! given `(seed, purpose)` yields the same sequence everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent consumers of randomness. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    FeatureMask = 1,
    EdgeMask = 2,
    Split = 3,
    ReconInit = 4,
    ReconDropout = 5,
    FusionInit = 6,
    ClassifierInit = 7,
    ClassifierDropout = 8,
    Generator = 9,
}

pub fn stream(seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
