//! Seeded random streams. Everything stochastic in the crate draws from a
//! [`RandomStream`] created here, so a seed fully determines a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomStream = ChaCha8Rng;

pub fn seeded(seed: u64) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> RandomStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
