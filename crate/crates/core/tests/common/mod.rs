#![allow(dead_code)]

use gnp_core::gp::Dataset;
use gnp_core::models::{CnnSpec, Discretisation, GnpConfig};
use rand::Rng;

/// Small GNP that keeps the test suite fast.
pub fn small_gnp() -> GnpConfig {
    GnpConfig {
        discretisation: Discretisation {
            points_per_unit: 8.0,
            margin: 0.5,
        },
        mean_cnn: CnnSpec {
            layers: 2,
            channels: 4,
            kernel_size: 3,
            bias: true,
        },
        kernel_cnn: CnnSpec {
            layers: 2,
            channels: 3,
            kernel_size: 3,
            bias: true,
        },
        init_lengthscale: 0.25,
        ..GnpConfig::default()
    }
}

pub fn random_context<R: Rng>(rng: &mut R, max: usize, lo: f64, hi: f64) -> Dataset {
    let n = rng.gen_range(0..=max);
    let x = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    let y = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Dataset::new(x, y).unwrap()
}

pub fn random_targets<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
