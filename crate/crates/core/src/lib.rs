//! Streaming autoregressive diffusion for speech-feature-conditioned 3D
//! facial motion: a VQ motion codec, a causal condition predictor, a
//! per-unit diffusion head and a chunked streaming runtime, all over a small
//! f64 tape autodiff.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod runtime;
pub mod synth;
pub mod tensor;
pub mod training;

pub use audio::AudioFeatureSequence;
pub use config::{ModelConfig, Profile, RunConfig, RuntimeConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::FaceModel;
pub use motion::MotionSequence;
pub use runtime::{LatencyReport, StreamSession};
pub use tensor::Tensor;
