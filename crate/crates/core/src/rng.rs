//! Seeded random streams.
//!
//! Every random choice in a run is drawn from one root seed split into named
//! ChaCha streams, so rerunning a single stage reproduces it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sampling,
    Init,
    Clustering,
    Batching,
    Bench,
    Eval,
    Synthetic,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Sampling => 1,
            Stream::Init => 2,
            Stream::Clustering => 3,
            Stream::Batching => 4,
            Stream::Bench => 5,
            Stream::Eval => 6,
            Stream::Synthetic => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Derives an independent seed for a sub-task (e.g. a bench arm) from a root seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
