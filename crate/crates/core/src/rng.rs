//! Seeded random streams.
//!
//! Every stochastic routine takes a `&mut impl Rng`. The CLI derives one ChaCha stream per
//! chain from the base seed and the chain index, so results never depend on how many worker
//! threads are used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream `index` of the generator seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw an index from an (assumed normalized) probability vector.
///
/// Falls back to the last index with positive mass when rounding leaves the cumulative sum
/// slightly below the uniform draw.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
