#![allow(dead_code)]

use facestream::config::{DataConfig, ModelConfig, Profile, RunConfig, TrainConfig};
use facestream::motion::MotionSequence;
use facestream::synth::{generate_split, make_splits, Sample, Split};
use facestream::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn random_motion(frames: usize, vertices: usize, seed: u64) -> MotionSequence {
    let mut r = rng(seed);
    let offsets = (0..frames * vertices * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    MotionSequence::new(frames, vertices, offsets, 25.0).unwrap()
}

pub fn tiny_data() -> DataConfig {
    DataConfig {
        fps: 25.0,
        frames: 24,
        vertices: 30,
        audio_dim: 4,
        train_speakers: 2,
        train_sequences: 4,
        val_sequences: 1,
        test_sequences: 2,
        amplitude: 1.0,
        feature_noise: 0.01,
    }
}

/// Small enough for finite differences over every parameter class.
pub fn tiny_model_config() -> ModelConfig {
    let data = tiny_data();
    let mut cfg = RunConfig::for_profile(Profile::SyntheticSmall).model();
    cfg.codec.vertices = data.vertices;
    cfg.codec.width = 8;
    cfg.codec.codebook_size = 16;
    cfg.codec.components = 2;
    cfg.codec.encoder_layers = 1;
    cfg.codec.decoder_layers = 1;
    cfg.codec.heads = 2;
    cfg.codec.ff_dim = 16;
    cfg.predictor.hidden = 16;
    cfg.predictor.ff_dim = 32;
    cfg.predictor.layers = 1;
    cfg.predictor.heads = 2;
    cfg.predictor.history_frames = 4;
    cfg.predictor.audio_dim = data.audio_dim;
    cfg.predictor.speakers = data.train_speakers;
    cfg.diffusion.num_steps = 100;
    cfg.diffusion.sample_steps = 10;
    cfg
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        stage1_epochs: epochs,
        stage2_epochs: epochs,
        learning_rate: 3e-3,
        stage2_learning_rate: None,
        batch_size: 1,
        lr_halving_interval: 0,
        weight_decay: 0.01,
        seed: 5,
        finetune_decoder: false,
        window_stride_units: 1,
    }
}

pub fn tiny_split(split: Split) -> Vec<Sample> {
    let data = tiny_data();
    let manifest = make_splits(&data, 11).unwrap();
    generate_split(&data, &manifest, split).unwrap()
}
