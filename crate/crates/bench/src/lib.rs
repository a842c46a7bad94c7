//! Seeded input builders shared by the benchmarks.

use lunar_cnn::rng::stream_rng;
use lunar_cnn::{GrayImage, Tensor};
use rand::Rng;

/// Uniform values in [0, 1), deterministic per seed.
pub fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 0xbe9c);
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(dims, data).expect("valid bench shape")
}

/// Random grayscale image, deterministic per seed.
pub fn rand_image(side: usize, seed: u64) -> GrayImage {
    let mut rng = stream_rng(seed, 0x1439);
    let pixels = (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
    GrayImage::new(side, side, pixels).expect("valid bench image")
}
