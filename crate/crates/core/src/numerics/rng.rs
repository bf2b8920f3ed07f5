//! Seedable random streams.
//!
//! Every stochastic routine takes an explicit `&mut Rng`. Independent
//! streams for parallel work are derived from a base seed with [`stream`],
//! so results depend only on `(seed, stream id)` and not on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `id` of the generator family keyed by `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
