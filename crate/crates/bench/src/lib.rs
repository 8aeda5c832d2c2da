//! Shared fixtures for the pipeline benchmarks: deterministic random
//! tensors and ready-made model pieces so each bench measures one hot path.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use texparse_core::{Backbone, BackboneConfig, HeadConfig, HeadParams, NoiseSchedule};

/// Uniform `[0, 1)` matrix with a fixed seed.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>())
}

/// Uniform `[0, 1)` RGB image tensor `[3, size, size]`.
pub fn random_image(size: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, size, size), |_| rng.gen::<f64>())
}

/// Feature map shaped for the default head config.
pub fn random_features(cfg: &HeadConfig, grid: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((cfg.c_f, grid, grid), |_| rng.gen::<f64>() - 0.5)
}

/// Default toy backbone with its schedule.
pub fn toy_backbone() -> (Backbone, NoiseSchedule) {
    let cfg = BackboneConfig::default();
    let schedule = cfg.build_schedule().expect("default schedule builds");
    let backbone = Backbone::from_provider(cfg, None).expect("toy backbone builds");
    (backbone, schedule)
}

/// Default head parameters, deterministically initialized.
pub fn toy_head() -> (HeadConfig, HeadParams) {
    let cfg = HeadConfig::default();
    let params = HeadParams::init(&cfg, 42).expect("default head initializes");
    (cfg, params)
}
