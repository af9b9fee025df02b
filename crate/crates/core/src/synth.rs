//! Procedural paired data: smooth articulation envelopes drive a small face
//! topology, and audio-like features are a fixed nonlinear image of the same
//! envelopes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatureSequence;
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::metrics::RegionSpec;
use crate::motion::MotionSequence;
use crate::tensor::Tensor;

pub const LIP_VERTICES: usize = 6;
pub const UPPER_FACE_VERTICES: usize = 8;
pub const JAW_VERTICES: usize = 6;
pub const CHANNELS: usize = 3;
pub const TOPOLOGY_SEED: u64 = 0x7090;

/// Articulation channels, in envelope order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    MouthOpen = 0,
    LipRound = 1,
    BrowRaise = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTopology {
    pub vertices: usize,
    /// `V` template positions.
    pub template: Vec<[f64; 3]>,
    pub region: RegionSpec,
    pub jaw_indices: Vec<usize>,
    /// One `V×3` displacement field per channel.
    pub basis: Vec<Vec<f64>>,
    audio_weight: Vec<f64>,
    audio_bias: Vec<f64>,
    pub audio_dim: usize,
}

impl SynthTopology {
    pub fn new(vertices: usize, amplitude: f64, audio_dim: usize) -> Result<Self> {
        let regioned = LIP_VERTICES + UPPER_FACE_VERTICES + JAW_VERTICES;
        if vertices < regioned {
            return Err(Error::invalid(format!("synthetic topology needs at least {regioned} vertices")));
        }
        if audio_dim == 0 {
            return Err(Error::invalid("audio feature width must be positive"));
        }
        let mut template = vec![
            [0.0, -0.35, 0.10],
            [0.0, -0.45, 0.10],
            [-0.15, -0.40, 0.08],
            [0.15, -0.40, 0.08],
            [-0.08, -0.36, 0.09],
            [0.08, -0.44, 0.09],
        ];
        for i in 0..UPPER_FACE_VERTICES {
            let x = -0.35 + 0.1 * i as f64;
            template.push([x, 0.35 + 0.05 * (i % 2) as f64, 0.05]);
        }
        for i in 0..JAW_VERTICES {
            let x = -0.25 + 0.1 * i as f64;
            template.push([x, -0.65 - 0.05 * (1.0 - x.abs() * 4.0).max(0.0), 0.0]);
        }
        for i in regioned..vertices {
            let a = (i - regioned) as f64 * 2.399_963;
            template.push([0.5 * a.cos(), 0.1 * a.sin(), -0.05]);
        }
        let lips: Vec<usize> = (0..LIP_VERTICES).collect();
        let upper: Vec<usize> = (LIP_VERTICES..LIP_VERTICES + UPPER_FACE_VERTICES).collect();
        let jaw: Vec<usize> = (LIP_VERTICES + UPPER_FACE_VERTICES..regioned).collect();

        let mut open = vec![0.0; vertices * 3];
        let lip_drop = [0.3, -1.0, -0.4, -0.4, 0.25, -0.9];
        for (&v, d) in lips.iter().zip(lip_drop) {
            open[3 * v + 1] = d * amplitude;
        }
        for &v in &jaw {
            open[3 * v + 1] = -0.8 * amplitude;
            open[3 * v + 2] = -0.1 * amplitude;
        }
        let mut round = vec![0.0; vertices * 3];
        for &v in &lips {
            if template[v][0] != 0.0 {
                round[3 * v] = -template[v][0].signum() * 0.5 * amplitude;
            }
            round[3 * v + 2] = 0.6 * amplitude;
        }
        let mut brow = vec![0.0; vertices * 3];
        for &v in &upper {
            brow[3 * v + 1] = 0.6 * amplitude;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(TOPOLOGY_SEED);
        let audio_weight = (0..audio_dim * CHANNELS).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let audio_bias = (0..audio_dim).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let gap = [template[0][0] - template[1][0], template[0][1] - template[1][1], template[0][2] - template[1][2]];
        Ok(Self {
            vertices,
            template,
            region: RegionSpec { lip_indices: lips, upper_face_indices: upper, mouth_pair: (0, 1), mouth_rest_gap: gap },
            jaw_indices: jaw,
            basis: vec![open, round, brow],
            audio_weight,
            audio_bias,
            audio_dim,
        })
    }

    pub fn from_config(config: &DataConfig) -> Result<Self> {
        Self::new(config.vertices, config.amplitude, config.audio_dim)
    }

    fn features(&self, env: &[f64; CHANNELS]) -> Vec<f64> {
        (0..self.audio_dim)
            .map(|c| {
                let w = &self.audio_weight[c * CHANNELS..(c + 1) * CHANNELS];
                (w.iter().zip(env).map(|(a, e)| a * e).sum::<f64>() + self.audio_bias[c]).tanh()
            })
            .collect()
    }
}

/// Unit-variance noise smoothed by two passes of a width-`w` box filter.
pub fn smooth_noise(rng: &mut impl Rng, frames: usize, width: usize) -> Vec<f64> {
    let w = width.max(1);
    let raw: Vec<f64> = (0..frames + 2 * (w - 1)).map(|_| rng.sample(StandardNormal)).collect();
    let boxed = |x: &[f64]| -> Vec<f64> {
        let mut cum = vec![0.0; x.len() + 1];
        for (i, v) in x.iter().enumerate() {
            cum[i + 1] = cum[i] + v;
        }
        (0..=x.len() - w).map(|i| (cum[i + w] - cum[i]) / w as f64).collect()
    };
    let once = boxed(&raw);
    let twice = boxed(&once);
    let kernel_energy: f64 = (0..2 * w - 1)
        .map(|k| {
            let overlap = (k + 1).min(2 * w - 1 - k) as f64;
            (overlap / (w * w) as f64).powi(2)
        })
        .sum();
    twice.iter().map(|v| v / kernel_energy.sqrt()).collect()
}

/// Per-speaker `(gain, offset)` for each channel.
pub fn speaker_style(speaker: usize) -> [(f64, f64); CHANNELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(TOPOLOGY_SEED ^ (0x51ea_0000 + speaker as u64));
    let mut out = [(1.0, 0.0); CHANNELS];
    for slot in &mut out {
        *slot = (rng.gen_range(0.8..1.2), rng.gen_range(-0.15..0.15));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
    /// `[T, 3]` envelopes in channel order.
    pub envelopes: Tensor,
}

pub fn generate_pair(seed: u64, frames: usize, topology: &SynthTopology, speaker: usize, config: &DataConfig) -> Result<SynthPair> {
    if frames == 0 {
        return Err(Error::invalid("a sequence needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = ((config.fps / 4.0).round() as usize).max(1);
    let raw: Vec<Vec<f64>> = (0..CHANNELS).map(|_| smooth_noise(&mut rng, frames, width)).collect();
    let style = speaker_style(speaker);
    let v3 = topology.vertices * 3;
    let mut motion = Vec::with_capacity(frames * v3);
    let mut feats = Vec::with_capacity(frames * topology.audio_dim);
    let mut envs = Vec::with_capacity(frames * CHANNELS);
    #[allow(clippy::needless_range_loop)]
    for t in 0..frames {
        let env = [1.0 / (1.0 + (-2.0 * raw[0][t]).exp()), raw[1][t].tanh(), raw[2][t].tanh()];
        envs.extend_from_slice(&env);
        let mut frame = vec![0.0; v3];
        for (c, basis) in topology.basis.iter().enumerate() {
            let a = style[c].0 * env[c] + style[c].1;
            for (f, b) in frame.iter_mut().zip(basis) {
                *f += a * b;
            }
        }
        motion.extend(frame);
        for f in topology.features(&env) {
            feats.push(f + config.feature_noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(SynthPair {
        audio: AudioFeatureSequence::new(Tensor::new(&[frames, topology.audio_dim], feats)?, config.fps)?,
        motion: MotionSequence::new(frames, topology.vertices, motion, config.fps)?,
        envelopes: Tensor::new(&[frames, CHANNELS], envs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub id: String,
    pub seed: u64,
    pub speaker: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fps: f64,
    pub vertices: usize,
    pub audio_dim: usize,
    pub train_speakers: usize,
    pub train: Vec<SequenceSpec>,
    pub val: Vec<SequenceSpec>,
    pub test: Vec<SequenceSpec>,
}

const SPLIT_SEED_STRIDE: u64 = 1_000_000;

/// Disjoint seed ranges per split; the first test sequence uses speaker
/// `train_speakers`, which never appears in training.
pub fn make_splits(config: &DataConfig, base_seed: u64) -> Result<SplitManifest> {
    if config.train_sequences == 0 || config.val_sequences == 0 || config.test_sequences == 0 || config.train_speakers == 0 {
        return Err(Error::invalid("split counts and speaker count must be positive"));
    }
    let k = config.train_speakers;
    let split = |name: &str, offset: u64, count: usize, unseen_first: bool| -> Vec<SequenceSpec> {
        (0..count)
            .map(|i| SequenceSpec {
                id: format!("{name}_{i:03}"),
                seed: base_seed.wrapping_mul(7_919).wrapping_add(offset * SPLIT_SEED_STRIDE + i as u64),
                speaker: if unseen_first && i == 0 { k } else { i % k },
                frames: config.frames,
            })
            .collect()
    };
    Ok(SplitManifest {
        fps: config.fps,
        vertices: config.vertices,
        audio_dim: config.audio_dim,
        train_speakers: k,
        train: split("train", 0, config.train_sequences, false),
        val: split("val", 1, config.val_sequences, false),
        test: split("test", 2, config.test_sequences, true),
    })
}

impl SplitManifest {
    pub fn all(&self) -> impl Iterator<Item = &SequenceSpec> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("split manifest: {e}")))
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn motion_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.sgmo"))
}

pub fn audio_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.sgaf"))
}

/// Writes every sequence of `manifest` plus the manifest itself into `dir`.
pub fn write_dataset(dir: &Path, config: &DataConfig, manifest: &SplitManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let topo = SynthTopology::from_config(config)?;
    for spec in manifest.all() {
        let pair = generate_pair(spec.seed, spec.frames, &topo, spec.speaker, config)?;
        pair.motion.save(motion_path(dir, &spec.id))?;
        pair.audio.save(audio_path(dir, &spec.id))?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_toml())?;
    Ok(())
}

/// One loaded (audio, motion) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spec: SequenceSpec,
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn load_manifest(dir: &Path) -> Result<SplitManifest> {
    SplitManifest::from_toml(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = load_manifest(dir)?;
    let specs = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
        Split::Test => &manifest.test,
    };
    specs
        .iter()
        .map(|spec| {
            Ok(Sample {
                spec: spec.clone(),
                audio: AudioFeatureSequence::load(audio_path(dir, &spec.id))?,
                motion: MotionSequence::load(motion_path(dir, &spec.id))?,
            })
        })
        .collect()
}

/// Generates a split in memory without touching disk.
pub fn generate_split(config: &DataConfig, manifest: &SplitManifest, split: Split) -> Result<Vec<Sample>> {
    let topo = SynthTopology::from_config(config)?;
    let specs = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
        Split::Test => &manifest.test,
    };
    specs
        .iter()
        .map(|spec| {
            let pair = generate_pair(spec.seed, spec.frames, &topo, spec.speaker, config)?;
            Ok(Sample { spec: spec.clone(), audio: pair.audio, motion: pair.motion })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};

    fn data() -> DataConfig {
        RunConfig::for_profile(Profile::SyntheticSmall).data
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = data();
        let topo = SynthTopology::from_config(&cfg).unwrap();
        let a = generate_pair(5, 40, &topo, 1, &cfg).unwrap();
        assert_eq!(a, generate_pair(5, 40, &topo, 1, &cfg).unwrap());
        assert_ne!(a.motion, generate_pair(6, 40, &topo, 1, &cfg).unwrap().motion);
        assert_eq!(a.motion.frames(), 40);
        assert_eq!(a.motion.vertices(), 30);
        assert_eq!(a.audio.features().shape(), &[40, cfg.audio_dim]);
    }

    #[test]
    fn basis_fields_stay_in_regions() {
        let topo = SynthTopology::new(30, 1.0, 4).unwrap();
        let lips = &topo.region.lip_indices;
        let upper = &topo.region.upper_face_indices;
        for v in 0..30 {
            let nz = |c: usize| topo.basis[c][3 * v..3 * v + 3].iter().any(|x| *x != 0.0);
            if nz(Channel::MouthOpen as usize) {
                assert!(lips.contains(&v) || topo.jaw_indices.contains(&v));
            }
            if nz(Channel::LipRound as usize) {
                assert!(lips.contains(&v));
            }
            if nz(Channel::BrowRaise as usize) {
                assert!(upper.contains(&v));
            }
        }
        let (u, l) = topo.region.mouth_pair;
        let open = &topo.basis[0];
        assert!(open[3 * u + 1] > open[3 * l + 1]);
    }

    #[test]
    fn smoothed_noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = smooth_noise(&mut rng, 20_000, 6);
        assert_eq!(x.len(), 20_000);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn splits_are_disjoint_and_hold_an_unseen_speaker() {
        let cfg = data();
        let m = make_splits(&cfg, 0).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 2, 2));
        let mut seeds: Vec<u64> = m.all().map(|s| s.seed).collect();
        let mut ids: Vec<&str> = m.all().map(|s| s.id.as_str()).collect();
        seeds.sort();
        seeds.dedup();
        ids.sort();
        ids.dedup();
        assert_eq!(seeds.len(), 12);
        assert_eq!(ids.len(), 12);
        assert!(m.train.iter().all(|s| s.speaker < cfg.train_speakers));
        assert!(m.test.iter().any(|s| s.speaker >= cfg.train_speakers));
        assert_eq!(SplitManifest::from_toml(&m.to_toml()).unwrap(), m);
    }
}
