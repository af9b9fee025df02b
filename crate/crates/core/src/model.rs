//! The complete generator: codec, condition predictor and diffusion head over
//! one parameter store, with checkpoint conversion.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::codec::{MotionCodec, CODEBOOK_PARAM};
use crate::config::ModelConfig;
use crate::diffusion::{DiffusionHead, NoiseSchedule};
use crate::error::{Error, Result};
use crate::predictor::ConditionPredictor;
use crate::tensor::ParamStore;

pub const CODEC_PREFIX: &str = "codec.";

#[derive(Debug, Clone)]
pub struct FaceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub codec: MotionCodec,
    pub predictor: ConditionPredictor,
    pub head: DiffusionHead,
    pub schedule: NoiseSchedule,
}

impl FaceModel {
    /// Fresh weights, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let codec = MotionCodec::init(&config.codec, &mut store, &mut rng)?;
        let predictor = ConditionPredictor::init(config, &mut store, &mut rng)?;
        let head = DiffusionHead::init(&mut store, config.unit_dim(), config.predictor.hidden, &mut rng)?;
        let schedule = NoiseSchedule::from_config(&config.diffusion)?;
        Ok(Self { config: config.clone(), store, codec, predictor, head, schedule })
    }

    /// Wraps weights already in `store`, checking every shape against `config`.
    pub fn attach(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let codec = MotionCodec::attach(&config.codec, &store)?;
        let predictor = ConditionPredictor::attach(config, &store)?;
        let head = DiffusionHead::attach(&store, config.unit_dim(), config.predictor.hidden)?;
        let schedule = NoiseSchedule::from_config(&config.diffusion)?;
        Ok(Self { config: config.clone(), store, codec, predictor, head, schedule })
    }

    /// Replaces the codec weights with those of a codec-only checkpoint.
    pub fn load_codec(&mut self, ck: &Checkpoint) -> Result<()> {
        let cfg = ModelConfig::from_manifest(&ck.manifest)?;
        if cfg.codec != self.config.codec {
            return Err(Error::Incompatible("codec checkpoint was trained with a different codec config".into()));
        }
        let (codec_store, _) = ck.clone().into_store()?;
        MotionCodec::attach(&cfg.codec, &codec_store)?;
        self.store.merge_prefix(&codec_store, CODEC_PREFIX)
    }

    pub fn codec_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store.subset(CODEC_PREFIX), self.config.to_manifest())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.config.to_manifest())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (store, manifest) = ck.into_store()?;
        let config = ModelConfig::from_manifest(&manifest)?;
        Self::attach(&config, store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn codebook_size(&self) -> usize {
        self.store.value(CODEBOOK_PARAM).map(|t| t.rows()).unwrap_or(0)
    }
}
