//! Seeded inputs shared by the benchmarks.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfosr::openmax::{Calibration, ClassModel, DistanceMetric, WeightMode, CALIBRATION_VERSION};
use rfosr::preprocess::RealMatrix;

pub fn noise_iq(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// `n` unit-norm rows of width `d`, row-major.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.extend(row.iter().map(|v| v / norm));
    }
    z
}

pub fn spectrograms(n: usize, grid: (usize, usize), seed: u64) -> Vec<RealMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RealMatrix::new(grid.0, grid.1, (0..grid.0 * grid.1).map(|_| rng.random()).collect()))
        .collect()
}

pub fn calibration(classes: usize, alpha: usize, seed: u64) -> Calibration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Calibration {
        version: CALIBRATION_VERSION,
        alpha,
        tail_size: 20,
        distance_metric: DistanceMetric::Euclidean,
        weight_mode: WeightMode::EvtCdf,
        simulated_unknown: None,
        classes: (0..classes)
            .map(|id| ClassModel {
                id,
                mav: (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect(),
                shape: rng.random_range(1.0..3.0),
                scale: rng.random_range(1.0..6.0),
                location: rng.random_range(0.0..2.0),
                tail_max: 0.0,
            })
            .collect(),
    }
}
