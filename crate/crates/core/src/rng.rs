//! Named random sub-streams derived from a single run seed.
//!
//! Each consumer draws from its own ChaCha stream, so adding draws in one
//! place (say, more vMF samples) never shifts the numbers another consumer
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Batch = 3,
    Vmf = 4,
    Epsilon = 5,
    Synth = 6,
    Geometry = 7,
    Semantic = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
