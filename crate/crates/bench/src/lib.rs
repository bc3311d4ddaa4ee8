//! Fixtures shared by the benchmarks.

use fsenet_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random RGB image.
pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
}
