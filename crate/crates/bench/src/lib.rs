//! Fixtures shared by the benchmarks.

use manipure_core::{rng, ImageTensor, Tensor};
use rand::Rng;

/// Uniform random `side×side×3` image in `[0, 1]`.
pub fn random_image(side: usize, seed: u64) -> ImageTensor {
    let mut r = rng::seeded(seed);
    let data = (0..side * side * 3).map(|_| r.random::<f32>()).collect();
    ImageTensor::new(Tensor::new(vec![side, side, 3], data).expect("valid dims")).expect("values in range")
}
