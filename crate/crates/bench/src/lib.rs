//! Shared fixtures for the criterion benches.

use hyperlab_core::linalg::Mat;
use hyperlab_core::scalefit::SweepPoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    Mat::randn(rows, cols, &mut rng(seed))
}

/// Eight-point parabola in `ln η` with a fixed small perturbation.
pub fn sweep_points() -> Vec<SweepPoint> {
    (1..=8)
        .map(|i| {
            let lr = 0.0025 * i as f64;
            let wobble = 0.002 * ((i * 37 % 11) as f64 / 11.0 - 0.5);
            SweepPoint::new(lr, 0.055 * (lr / 0.009).ln().powi(2) + 2.47 + wobble)
        })
        .collect()
}
