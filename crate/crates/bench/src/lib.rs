//! Fixtures shared by the engine benchmarks.

use std::sync::Arc;

use facestream::audio::AudioFeatureSequence;
use facestream::config::{Profile, RunConfig};
use facestream::model::FaceModel;
use facestream::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained synthetic-small model; timing does not depend on the weights.
pub fn bench_model(seed: u64) -> Arc<FaceModel> {
    let cfg = RunConfig::for_profile(Profile::SyntheticSmall);
    Arc::new(FaceModel::init(&cfg.model(), seed).expect("synthetic-small config is valid"))
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

/// Uniform-noise feature rows at the model's frame rate.
pub fn random_audio(model: &FaceModel, frames: usize, seed: u64) -> AudioFeatureSequence {
    let t = random_tensor(frames, model.predictor.audio_dim, seed);
    AudioFeatureSequence::new(t, model.config.fps).expect("matching shape")
}
