//! Shared fixtures for the criterion benches.

use dgs_core::data::make_synthetic;
use dgs_core::detect::{BBox, Detection};
use dgs_core::model::{Model, ModelConfig};
use dgs_core::train::TrainSample;
use dgs_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `n` overlapping candidates spread over a 640 × 640 image.
pub fn candidates(n: usize, classes: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..600.0), rng.random_range(0.0..600.0));
            let (w, h) = (rng.random_range(10.0..120.0), rng.random_range(10.0..120.0));
            Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

/// Model from a named preset with a square input of `size` pixels.
pub fn model(preset: &str, size: usize) -> Model<f32> {
    let cfg = ModelConfig {
        input_size: [size, size],
        ..ModelConfig::preset(preset).expect("known preset")
    };
    Model::build(&cfg, 0).expect("valid config")
}

/// Letterboxed synthetic training samples.
pub fn train_samples(n: usize, size: usize) -> Vec<TrainSample> {
    make_synthetic(n, size, 7)
        .into_iter()
        .map(|(image, labels)| {
            dgs_core::data::Sample {
                image,
                labels,
                path: "synthetic".into(),
            }
            .to_train(size, size)
            .expect("synthetic sample")
            .0
        })
        .collect()
}
