//! Shared fixtures for the benchmarks.

use std::path::Path;

use gnp_core::experiment::{ExperimentConfig, PredictorSpec};
use gnp_core::gp::Dataset;
use gnp_core::models::GnpConfig;

/// The GNP of the committed desk-scale training config.
pub fn desk_gnp() -> GnpConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/eq_gnp_desk.json");
    match ExperimentConfig::load(&path).expect("desk config").model {
        PredictorSpec::Gnp(cfg) => cfg,
        other => panic!("desk config holds {other:?}"),
    }
}

/// Ten context points and sixteen targets spread over [-2, 2].
pub fn episode() -> (Dataset, Vec<f64>) {
    let x: Vec<f64> = (0..10).map(|i| -2.0 + 0.4 * i as f64 + 0.05).collect();
    let y = x.iter().map(|v| v.sin()).collect();
    let t = (0..16).map(|i| -2.0 + 0.25 * i as f64 + 0.1).collect();
    (Dataset { x, y }, t)
}
