//! Run configuration: dataset profile, model widths, schedule and training
//! hyperparameters. Stored as TOML; a config file only needs the keys it
//! overrides, everything else comes from the selected profile.
//!
//! ```toml
//! schema_version = 1
//! profile = "synthetic-small"   # | "biwi-profile" | "vocaset-profile"
//! precision = 64
//! seed = 7
//!
//! [data]      # fps, frames, vertices, audio_dim, speakers, train/val/test counts
//! [codec]     # width, codebook_size, components, encoder/decoder layers, heads, ff_dim
//! [predictor] # hidden, ff_dim, layers, heads, history_frames
//! [diffusion] # num_steps, beta_start, beta_end, sample_steps
//! [train]     # stage1/stage2 epochs, learning rates, halving interval, weight decay, ...
//! [runtime]   # reencode_history
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "synthetic-small")]
    SyntheticSmall,
    #[serde(rename = "biwi-profile")]
    Biwi,
    #[serde(rename = "vocaset-profile")]
    Vocaset,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::SyntheticSmall => "synthetic-small",
            Profile::Biwi => "biwi-profile",
            Profile::Vocaset => "vocaset-profile",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-small" => Ok(Profile::SyntheticSmall),
            "biwi-profile" => Ok(Profile::Biwi),
            "vocaset-profile" => Ok(Profile::Vocaset),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub fps: f64,
    pub frames: usize,
    pub vertices: usize,
    pub audio_dim: usize,
    /// Speakers that appear in training; the style embedding has this many rows.
    pub train_speakers: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    /// Scale applied to every articulation basis field.
    pub amplitude: f64,
    pub feature_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub vertices: usize,
    pub width: usize,
    pub codebook_size: usize,
    /// Frames per latent unit (face components).
    pub components: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub history_frames: usize,
    pub audio_dim: usize,
    pub speakers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// Stage-2 learning rate; falls back to `learning_rate` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Stage-1 learning rate halves every this many epochs (0 disables).
    pub lr_halving_interval: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub finetune_decoder: bool,
    /// Stride, in latent units, between consecutive training windows.
    pub window_stride_units: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Re-encode decoded frames into history instead of re-quantizing samples.
    pub reencode_history: bool,
}

/// The model half of a run config; embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fps: f64,
    pub codec: CodecConfig,
    pub predictor: PredictorConfig,
    pub diffusion: DiffusionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub profile: Profile,
    /// Numeric width in bits; only 64 is supported.
    pub precision: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub predictor: PredictorConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub runtime: RuntimeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 400,
            stage2_epochs: 200,
            learning_rate: 1e-4,
            stage2_learning_rate: None,
            batch_size: 1,
            lr_halving_interval: 20,
            weight_decay: 0.01,
            seed: 0,
            finetune_decoder: false,
            window_stride_units: 6,
        }
    }
}

impl TrainConfig {
    pub fn stage2_lr(&self) -> f64 {
        self.stage2_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.batch_size == 0 || self.window_stride_units == 0 {
            return Err(Error::Config("epoch counts, batch size and window stride must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.stage2_lr() >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { num_steps: 1000, beta_start: 0.00085, beta_end: 0.012, sample_steps: 50 }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::SyntheticSmall => Self::synthetic_small(),
            Profile::Biwi => Self::full_scale(profile, 25.0, 23_370, 512, 8, 1024, 2048, 120, true, 40),
            Profile::Vocaset => Self::full_scale(profile, 60.0, 5023, 256, 16, 768, 1024, 60, false, 20),
        }
    }

    fn synthetic_small() -> Self {
        let data = DataConfig {
            fps: 25.0,
            frames: 240,
            vertices: 30,
            audio_dim: 16,
            train_speakers: 3,
            train_sequences: 8,
            val_sequences: 2,
            test_sequences: 2,
            amplitude: 1.0,
            feature_noise: 0.01,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            profile: Profile::SyntheticSmall,
            precision: 64,
            seed: 7,
            codec: CodecConfig {
                vertices: data.vertices,
                width: 64,
                codebook_size: 64,
                components: 4,
                encoder_layers: 2,
                decoder_layers: 2,
                heads: 4,
                ff_dim: 128,
            },
            predictor: PredictorConfig {
                hidden: 128,
                ff_dim: 256,
                layers: 2,
                heads: 4,
                history_frames: 48,
                audio_dim: data.audio_dim,
                speakers: data.train_speakers,
            },
            diffusion: DiffusionConfig::default(),
            train: TrainConfig {
                stage1_epochs: 60,
                stage2_epochs: 60,
                learning_rate: 1e-3,
                stage2_learning_rate: Some(5e-4),
                lr_halving_interval: 20,
                ..TrainConfig::default()
            },
            runtime: RuntimeConfig { reencode_history: false },
            data,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn full_scale(
        profile: Profile,
        fps: f64,
        vertices: usize,
        codebook_size: usize,
        components: usize,
        hidden: usize,
        ff_dim: usize,
        history_frames: usize,
        finetune_decoder: bool,
        lr_halving_interval: usize,
    ) -> Self {
        let mut cfg = Self::synthetic_small();
        cfg.profile = profile;
        cfg.data.fps = fps;
        cfg.data.vertices = vertices;
        cfg.codec =
            CodecConfig { vertices, width: 1024, codebook_size, components, encoder_layers: 6, decoder_layers: 6, heads: 8, ff_dim: 1536 };
        cfg.predictor = PredictorConfig {
            hidden,
            ff_dim,
            layers: 2,
            heads: 4,
            history_frames,
            audio_dim: cfg.data.audio_dim,
            speakers: cfg.data.train_speakers,
        };
        cfg.train = TrainConfig { finetune_decoder, lr_halving_interval, ..TrainConfig::default() };
        cfg
    }

    /// Parses a TOML document, filling unspecified keys from its profile.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match overrides.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => Profile::SyntheticSmall,
        };
        let base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overrides);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { fps: self.data.fps, codec: self.codec.clone(), predictor: self.predictor.clone(), diffusion: self.diffusion.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.precision != 64 {
            return Err(Error::Config(format!("precision {} unsupported; only 64-bit is implemented", self.precision)));
        }
        if matches!(self.profile, Profile::Biwi | Profile::Vocaset) && ![25.0, 60.0].contains(&self.data.fps) {
            return Err(Error::Config("named profiles require fps 25 or 60".into()));
        }
        if self.codec.vertices != self.data.vertices {
            return Err(Error::Config("codec.vertices must equal data.vertices".into()));
        }
        if self.predictor.audio_dim != self.data.audio_dim || self.predictor.speakers != self.data.train_speakers {
            return Err(Error::Config("predictor audio_dim/speakers must match data".into()));
        }
        let d = &self.data;
        if d.frames == 0 || d.train_sequences == 0 || d.val_sequences == 0 || d.test_sequences == 0 || d.train_speakers == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        self.model().validate()?;
        self.train.validate()
    }
}

impl ModelConfig {
    pub fn history_units(&self) -> usize {
        self.predictor.history_frames.div_ceil(self.codec.components)
    }

    pub fn unit_dim(&self) -> usize {
        self.codec.components * self.codec.width
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.codec;
        let p = &self.predictor;
        let s = &self.diffusion;
        if c.width == 0 || c.codebook_size == 0 || c.components == 0 || c.heads == 0 || !c.width.is_multiple_of(c.heads) {
            return Err(Error::Config("codec width must be positive and divisible by heads".into()));
        }
        if p.hidden == 0 || p.heads == 0 || !p.hidden.is_multiple_of(p.heads) || p.layers == 0 {
            return Err(Error::Config("predictor hidden must be positive and divisible by heads".into()));
        }
        if p.history_frames < c.components {
            return Err(Error::Config("history_frames must be at least one latent unit".into()));
        }
        if s.num_steps < 2 || s.sample_steps == 0 || s.sample_steps > s.num_steps {
            return Err(Error::Config("diffusion needs num_steps >= 2 and 1 <= sample_steps <= num_steps".into()));
        }
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))
    }
}

fn merge(mut base: toml::Table, overrides: toml::Table) -> toml::Table {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in [Profile::SyntheticSmall, Profile::Biwi, Profile::Vocaset] {
            RunConfig::for_profile(p).validate().unwrap();
        }
    }

    #[test]
    fn full_scale_profiles_carry_history_lengths() {
        assert_eq!(RunConfig::for_profile(Profile::Biwi).predictor.history_frames, 120);
        assert_eq!(RunConfig::for_profile(Profile::Vocaset).predictor.history_frames, 60);
        assert_eq!(RunConfig::for_profile(Profile::Vocaset).codec.codebook_size, 256);
        assert_eq!(RunConfig::for_profile(Profile::Vocaset).codec.components, 16);
    }

    #[test]
    fn partial_override_keeps_profile_defaults() {
        let cfg = RunConfig::from_toml("profile = \"synthetic-small\"\n[train]\nstage1_epochs = 3\n").unwrap();
        assert_eq!(cfg.train.stage1_epochs, 3);
        assert_eq!(cfg.codec.width, 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::for_profile(Profile::SyntheticSmall);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_precision() {
        assert!(RunConfig::from_toml("[codec]\nwidht = 3\n").is_err());
        assert!(RunConfig::from_toml("precision = 32\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 9\n").is_err());
    }
}
