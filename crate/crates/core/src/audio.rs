//! Audio frontend: per-frame feature vectors, time alignment to the motion
//! rate, and the speaker style projection.
//!
//! The default feature extractor is a log-magnitude mel filterbank over
//! 25 ms Hann windows followed by a fixed, seed-locked random projection.
//! `SGAF` files store features: magic `"SGAF"`, `T_a u32`, `C_a u32`,
//! rate `f32`, then `T_a·C_a` little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::motion::{read_f32, read_f32s, read_u32};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"SGAF";
const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    /// `[T_a, C_a]`
    features: Tensor,
    /// Feature frames per second.
    pub rate: f64,
}

impl AudioFeatureSequence {
    pub fn new(features: Tensor, rate: f64) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("features must be [frames, width]"));
        }
        if !(rate > 0.0) {
            return Err(Error::invalid("feature rate must be positive"));
        }
        Ok(Self { features, rate })
    }

    pub fn empty(width: usize, rate: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[0, width]), rate)
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.rate
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames() {
            return Err(Error::invalid(format!("feature range {start}..{end} of {}", self.frames())));
        }
        let w = self.width();
        let data = self.features.data()[start * w..end * w].to_vec();
        Self::new(Tensor::new(&[end - start, w], data)?, self.rate)
    }

    /// Same features with every value set to zero (audio-blind control).
    pub fn zeroed(&self) -> Self {
        Self { features: Tensor::zeros(self.features.shape()), rate: self.rate }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        w.write_all(&(self.rate as f32).to_le_bytes())?;
        for v in self.features.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a feature file (expected SGAF)".into()));
        }
        let frames = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let rate = read_f32(r)? as f64;
        let data = read_f32s(r, frames * width)?;
        Self::new(Tensor::new(&[frames, width], data)?, rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut fs::read(path)?.as_slice())
    }
}

/// Settings of the filterbank frontend.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: f64,
    pub target_rate: f64,
    pub window_seconds: f64,
    pub filters: usize,
    pub out_dim: usize,
    pub projection_seed: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000.0, target_rate: 25.0, window_seconds: 0.025, filters: 26, out_dim: 16, projection_seed: 0x5eed }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `bins` FFT magnitude bins.
fn mel_filters(filters: usize, bins: usize, fft_len: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let centers: Vec<f64> =
        (0..filters + 2).map(|i| mel_to_hz(top * i as f64 / (filters + 1) as f64) * fft_len as f64 / sample_rate).collect();
    (0..filters)
        .map(|f| {
            let (lo, mid, hi) = (centers[f], centers[f + 1], centers[f + 2]);
            (0..bins)
                .map(|b| {
                    let b = b as f64;
                    if b <= lo || b >= hi {
                        0.0
                    } else if b <= mid {
                        (b - lo) / (mid - lo).max(1e-12)
                    } else {
                        (hi - b) / (hi - mid).max(1e-12)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log filterbank features of a mono waveform, one row per `1/target_rate` hop.
pub fn extract_features(waveform: &[f64], config: &FrontendConfig) -> Result<AudioFeatureSequence> {
    if !(config.sample_rate > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if !(config.target_rate > 0.0) || config.filters == 0 || config.out_dim == 0 {
        return Err(Error::invalid("target rate, filter count and width must be positive"));
    }
    if waveform.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    let fs = config.sample_rate;
    let hop = fs / config.target_rate;
    let frames = ((waveform.len() as f64 / hop).floor() as usize).max(1);
    let win = ((config.window_seconds * fs).round() as usize).max(2);
    let fft_len = win.next_power_of_two();
    let bins = fft_len / 2 + 1;
    let hann: Vec<f64> = (0..win).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos()).collect();
    let bank = mel_filters(config.filters, bins, fft_len, fs);

    let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
    let scale = 1.0 / (config.filters as f64).sqrt();
    let projection: Vec<f64> = (0..config.filters * config.out_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut out = Vec::with_capacity(frames * config.out_dim);
    let mut energies = vec![0.0; config.filters];
    for i in 0..frames {
        let start = (i as f64 * hop).round() as usize;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = if j < win { waveform.get(start + j).copied().unwrap_or(0.0) * hann[j] } else { 0.0 };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (e, filt) in energies.iter_mut().zip(&bank) {
            let power: f64 = filt.iter().zip(&buf[..bins]).map(|(w, c)| w * c.norm()).sum();
            *e = power.max(LOG_FLOOR).ln();
        }
        for c in 0..config.out_dim {
            out.push(energies.iter().enumerate().map(|(f, e)| e * projection[f * config.out_dim + c]).sum());
        }
    }
    AudioFeatureSequence::new(Tensor::new(&[frames, config.out_dim], out)?, config.target_rate)
}

/// Linearly interpolates features onto `frames` evenly spaced positions
/// spanning the original time extent.
pub fn resample_to_frames(feat: &AudioFeatureSequence, frames: usize) -> Result<Tensor> {
    let src = feat.frames();
    if frames == 0 || src == 0 {
        return Err(Error::invalid("resampling needs at least one source and one target frame"));
    }
    let w = feat.width();
    if frames == src {
        return Ok(feat.features().clone());
    }
    let mut out = Vec::with_capacity(frames * w);
    for k in 0..frames {
        let pos = if frames == 1 { 0.0 } else { k as f64 * (src - 1) as f64 / (frames - 1) as f64 };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        let (a, b) = (feat.row(lo), feat.row(hi));
        out.extend(a.iter().zip(b).map(|(x, y)| if frac == 0.0 { *x } else { x + frac * (y - x) }));
    }
    Tensor::new(&[frames, w], out)
}

/// Learned projection of a one-hot speaker vector into the model width.
#[derive(Debug, Clone)]
pub struct StyleProjection {
    linear: Linear,
    pub speakers: usize,
}

/// A speaker's style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub speaker_index: usize,
    /// `[1, C]`
    pub vector: Tensor,
}

impl StyleProjection {
    pub fn new(store: &mut ParamStore, name: &str, speakers: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if speakers == 0 {
            return Err(Error::invalid("style projection needs at least one speaker"));
        }
        Ok(Self { linear: Linear::new(store, name, speakers, width, false, rng)?, speakers })
    }

    pub fn one_hot(&self, speaker_index: usize) -> Result<Tensor> {
        if speaker_index >= self.speakers {
            return Err(Error::invalid(format!("speaker index {speaker_index} outside 0..{}", self.speakers)));
        }
        Ok(Tensor::from_fn(&[1, self.speakers], |i| if i == speaker_index { 1.0 } else { 0.0 }))
    }

    /// `one_hot(k) · W` on the tape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, speaker_index: usize) -> Result<crate::tensor::Var> {
        let onehot = g.constant(self.one_hot(speaker_index)?);
        self.linear.forward(g, store, onehot)
    }

    pub fn embed(&self, store: &ParamStore, speaker_index: usize) -> Result<StyleEmbedding> {
        let mut g = Graph::inference();
        let v = self.forward(&mut g, store, speaker_index)?;
        Ok(StyleEmbedding { speaker_index, vector: g.value(v).clone() })
    }

    pub fn weight<'a>(&self, store: &'a ParamStore) -> Result<&'a Tensor> {
        store.value(self.linear.weight_name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(seconds: f64, hz: f64, fs: f64) -> Vec<f64> {
        (0..(seconds * fs) as usize).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn silence_gives_identical_frames() {
        let feat = extract_features(&vec![0.0; 16_000], &FrontendConfig::default()).unwrap();
        for i in 1..feat.frames() {
            assert_eq!(feat.row(i), feat.row(0));
        }
    }

    #[test]
    fn one_second_at_25_hz_is_25_frames() {
        let feat = extract_features(&tone(1.0, 220.0, 16_000.0), &FrontendConfig::default()).unwrap();
        assert_eq!(feat.frames(), 25);
        assert_eq!(feat.width(), 16);
    }

    #[test]
    fn tone_and_noise_differ() {
        let cfg = FrontendConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = extract_features(&tone(1.0, 440.0, 16_000.0), &cfg).unwrap();
        let b = extract_features(&noise, &cfg).unwrap();
        let mean = |f: &AudioFeatureSequence| -> Vec<f64> {
            (0..f.width()).map(|c| (0..f.frames()).map(|i| f.row(i)[c]).sum::<f64>() / f.frames() as f64).collect()
        };
        let gap: f64 = mean(&a).iter().zip(mean(&b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(gap > 0.0);
    }

    #[test]
    fn bad_sample_rate() {
        let cfg = FrontendConfig { sample_rate: 0.0, ..Default::default() };
        assert!(extract_features(&[0.0; 10], &cfg).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = FrontendConfig::default();
        let w = tone(0.5, 300.0, 16_000.0);
        assert_eq!(extract_features(&w, &cfg).unwrap(), extract_features(&w, &cfg).unwrap());
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let f = AudioFeatureSequence::new(Tensor::new(&[2, 2], vec![0.0, 2.0, 1.0, 6.0]).unwrap(), 50.0).unwrap();
        assert_eq!(resample_to_frames(&f, 2).unwrap(), *f.features());
        let r = resample_to_frames(&f, 3).unwrap();
        assert_eq!(r.row(1), &[0.5, 4.0]);
    }

    #[test]
    fn style_is_row_of_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = StyleProjection::new(&mut store, "style", 3, 4, &mut rng).unwrap();
        let w = proj.weight(&store).unwrap().clone();
        for k in 0..3 {
            assert_eq!(proj.embed(&store, k).unwrap().vector.data(), w.row(k));
        }
        assert_ne!(proj.embed(&store, 0).unwrap(), proj.embed(&store, 1).unwrap());
        assert!(proj.embed(&store, 3).is_err());
    }

    #[test]
    fn single_speaker_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let proj = StyleProjection::new(&mut store, "style", 1, 4, &mut rng).unwrap();
        assert_eq!(proj.embed(&store, 0).unwrap(), proj.embed(&store, 0).unwrap());
    }

    #[test]
    fn sgaf_header() {
        let f = AudioFeatureSequence::new(Tensor::zeros(&[3, 2]), 50.0).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SGAF");
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(AudioFeatureSequence::read_from(&mut buf.as_slice()).unwrap(), f);
    }
}
