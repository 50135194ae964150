//! Named random streams derived from the single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Each stream is a separate ChaCha stream under the same key, so adding a
/// stream never perturbs the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Synth = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
