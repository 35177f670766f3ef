//! Named random substreams derived from one 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent consumers of randomness. Each gets its own ChaCha stream so
/// that, for example, changing the batch size leaves initialisation intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Batching = 1,
    Init = 2,
    Simulation = 3,
    WarmStart = 4,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
