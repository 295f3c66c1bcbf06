//! Synthetic scenes, the toy training loop and the ablation benchmark.

pub mod benchmark;
pub mod config;
pub mod scene;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use benchmark::{run_benchmark, BenchmarkReport};
pub use config::{BaselineMode, BenchmarkConfig, ConfigError, ConfigFile, SceneConfig, TrainConfig};
pub use scene::{generate_scene, prior_grid, Scene, SceneError};
pub use train::{train, validate, EpochLog, TrainError, TrainOutcome, ValidationReport};

/// Stream offsets. Every consumer of randomness gets its own ChaCha8 stream
/// under the run seed, so adding scenes never shifts another stream.
pub mod streams {
    pub const TRAIN_SCENES: u64 = 0;
    pub const VAL_SCENES: u64 = 1 << 32;
    pub const SHUFFLE: u64 = 2 << 32;
    pub const IOU_NOISE: u64 = 3 << 32;
}

/// ChaCha8 generator for `(seed, stream)`.
pub fn scene_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>, SceneError> {
    scene_set(cfg, count, streams::TRAIN_SCENES)
}

pub fn val_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>, SceneError> {
    scene_set(cfg, count, streams::VAL_SCENES)
}

fn scene_set(cfg: &SceneConfig, count: usize, base: u64) -> Result<Vec<Scene>, SceneError> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i, &mut scene_rng(cfg.seed, base + i as u64)))
        .collect()
}
