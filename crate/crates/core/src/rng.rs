//! Seeded random streams. All randomness is drawn from ChaCha8, which gives
//! identical output on every platform; independent replicates use separate
//! streams of the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream `index` of the generator keyed by `seed`.
pub fn stream(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
