//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdsn::{CtVolume, LabelVolume, Tensor, Volume};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("sized by shape")
}

pub fn random_volume(dims: [usize; 3], seed: u64) -> CtVolume {
    let t = random_tensor(&[dims.iter().product()], seed);
    Volume::new(dims, [1.0; 3], t.into_data()).expect("sized by dims")
}

pub fn random_mask(dims: [usize; 3], density: f64, seed: u64) -> LabelVolume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| r.random_bool(density) as u8).collect()).expect("sized by dims")
}
