//! Streaming generation: audio features in, motion frames out, one latent
//! unit (`H` frames) per autoregressive step.
//!
//! Incoming feature rows are linearly resampled so that motion frame `k`
//! reads raw position `k·rate/fps`. A unit is generated as soon as its full
//! `H`-frame audio interval is buffered; `finish` flushes a trailing partial
//! unit by repeating the last audio frame.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::audio::AudioFeatureSequence;
use crate::codec::{quantize, Codebook, LatentGrid};
use crate::config::RuntimeConfig;
use crate::diffusion::ddim_sample;
use crate::error::{Error, Result};
use crate::model::FaceModel;
use crate::motion::MotionSequence;
use crate::predictor::HistoryWindow;
use crate::tensor::Tensor;

/// Wall-clock and work accounting of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub first_frame_latency: f64,
    /// One entry per emitted frame: its unit's step time divided by `H`.
    pub per_frame_times: Vec<f64>,
    pub frontend_time: f64,
    pub predictor_time: f64,
    pub head_time: f64,
    pub codec_time: f64,
    pub denoise_calls: usize,
    pub units: usize,
    pub peak_history: usize,
}

impl LatencyReport {
    pub fn mean_frame_time(&self) -> f64 {
        self.per_frame_times.iter().sum::<f64>() / self.per_frame_times.len().max(1) as f64
    }
}

#[derive(Debug, Default)]
struct Clocks {
    first_push: Option<Instant>,
    first_frame: Option<Duration>,
    per_frame: Vec<f64>,
    frontend: Duration,
    predictor: Duration,
    head: Duration,
    codec: Duration,
    denoise_calls: usize,
    units: usize,
    peak_history: usize,
}

/// Seed of unit `u` in a session seeded with `seed`.
pub fn unit_seed(seed: u64, unit: usize) -> u64 {
    let mut z = seed ^ (unit as u64).wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct StreamSession {
    model: Arc<FaceModel>,
    codebook: Codebook,
    runtime: RuntimeConfig,
    speaker: usize,
    seed: u64,
    audio_rate: f64,
    history: HistoryWindow,
    /// Raw feature rows from `raw_first` on.
    raw: Vec<Vec<f64>>,
    raw_first: usize,
    raw_total: usize,
    /// Motion-rate audio rows from `audio_first` on.
    audio: Vec<f64>,
    audio_first: usize,
    audio_frames: usize,
    /// Decoded frames kept for the re-encoding history path.
    decoded: Vec<Vec<f64>>,
    next_frame: usize,
    finished: bool,
    clocks: Clocks,
}

/// Starts an empty session over shared weights.
pub fn open_stream(model: Arc<FaceModel>, speaker: usize, seed: u64, audio_rate: f64, runtime: &RuntimeConfig) -> Result<StreamSession> {
    if speaker >= model.predictor.style.speakers {
        return Err(Error::invalid(format!("style index {speaker} outside 0..{}", model.predictor.style.speakers)));
    }
    if !(audio_rate > 0.0) {
        return Err(Error::invalid("audio rate must be positive"));
    }
    let codebook = Codebook::from_store(&model.store)?;
    let history = HistoryWindow::new(model.config.history_units(), model.config.unit_dim());
    Ok(StreamSession {
        model,
        codebook,
        runtime: runtime.clone(),
        speaker,
        seed,
        audio_rate,
        history,
        raw: Vec::new(),
        raw_first: 0,
        raw_total: 0,
        audio: Vec::new(),
        audio_first: 0,
        audio_frames: 0,
        decoded: Vec::new(),
        next_frame: 0,
        finished: false,
        clocks: Clocks::default(),
    })
}

impl StreamSession {
    fn components(&self) -> usize {
        self.model.codec.components()
    }

    fn width(&self) -> usize {
        self.model.predictor.audio_dim
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    /// Raw position of motion frame `k`.
    fn position(&self, k: usize) -> f64 {
        k as f64 * self.audio_rate / self.model.config.fps
    }

    /// Resamples every motion frame whose interpolation support is buffered.
    fn resample_available(&mut self) {
        let c = self.width();
        loop {
            let p = self.position(self.audio_frames);
            let lo = p.floor() as usize;
            let frac = p - lo as f64;
            let need = if frac > 0.0 { lo + 1 } else { lo };
            if need >= self.raw_total {
                break;
            }
            let a = &self.raw[lo - self.raw_first];
            if frac > 0.0 {
                let b = &self.raw[lo + 1 - self.raw_first];
                self.audio.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
            } else {
                self.audio.extend_from_slice(a);
            }
            debug_assert_eq!(self.audio.len() % c, 0);
            self.audio_frames += 1;
        }
        let keep_from = (self.position(self.audio_frames).floor() as usize).min(self.raw_total);
        if keep_from > self.raw_first {
            self.raw.drain(..keep_from - self.raw_first);
            self.raw_first = keep_from;
        }
    }

    /// Appends a feature chunk and generates every unit it completes.
    pub fn push_audio(&mut self, chunk: &AudioFeatureSequence) -> Result<Vec<(usize, Vec<f64>)>> {
        if self.finished {
            return Err(Error::invalid("stream already finished"));
        }
        if chunk.rate != self.audio_rate {
            return Err(Error::invalid(format!("chunk rate {} differs from stream rate {}", chunk.rate, self.audio_rate)));
        }
        if chunk.frames() > 0 && chunk.width() != self.width() {
            return Err(Error::shape(format!("chunk width {} vs model audio width {}", chunk.width(), self.width())));
        }
        self.clocks.first_push.get_or_insert_with(Instant::now);
        let t0 = Instant::now();
        for i in 0..chunk.frames() {
            self.raw.push(chunk.row(i).to_vec());
        }
        self.raw_total += chunk.frames();
        self.resample_available();
        self.clocks.frontend += t0.elapsed();
        let mut out = Vec::new();
        let h = self.components();
        while (self.history.next_unit() + 1) * h <= self.audio_frames {
            out.extend(self.step(h)?);
        }
        Ok(out)
    }

    /// Generates the trailing partial unit, if any, and closes the stream.
    pub fn finish(&mut self) -> Result<Vec<(usize, Vec<f64>)>> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.finished = true;
        let h = self.components();
        let start = self.history.next_unit() * h;
        let real = self.audio_frames.saturating_sub(start);
        if real == 0 {
            return Ok(Vec::new());
        }
        let c = self.width();
        let last = self.audio[self.audio.len() - c..].to_vec();
        for _ in real..h {
            self.audio.extend_from_slice(&last);
        }
        self.audio_frames = start + h;
        self.step(real)
    }

    /// One autoregressive unit; emits its first `emit` frames.
    fn step(&mut self, emit: usize) -> Result<Vec<(usize, Vec<f64>)>> {
        let model = Arc::clone(&self.model);
        let h = self.components();
        let c = self.width();
        let unit = self.history.next_unit();
        let t_unit = Instant::now();

        let t = Instant::now();
        let rows = self.audio_frames - self.audio_first;
        let audio = Tensor::new(&[rows, c], self.audio.clone())?;
        let cond = model.predictor.predict_condition(&model.store, &self.history, &audio, self.audio_first, self.speaker)?;
        self.clocks.predictor += t.elapsed();

        let t = Instant::now();
        let bound = model.head.bind(&model.store);
        let sample = ddim_sample(
            &bound,
            &model.schedule,
            cond.last(),
            model.config.unit_dim(),
            model.config.diffusion.sample_steps,
            unit_seed(self.seed, unit),
        )?;
        self.clocks.denoise_calls += sample.denoise_calls;
        self.clocks.head += t.elapsed();

        let t = Instant::now();
        let width = model.config.codec.width;
        let mut ctx: Vec<f64> = self.history.units().flatten().copied().collect();
        ctx.extend_from_slice(&sample.z0);
        let ctx_rows = ctx.len() / width;
        let frames = model.codec.decode_rows(&model.store, &Tensor::new(&[ctx_rows, width], ctx)?)?;
        let new_frames = frames.slice_rows(ctx_rows - h, ctx_rows)?;
        if self.runtime.reencode_history {
            self.reencode(&new_frames)?;
        } else {
            let z = Tensor::new(&[h, width], sample.z0)?;
            let grid = quantize(&z, &self.codebook, h)?;
            self.history.push(grid.unit(0).to_vec())?;
        }
        self.clocks.codec += t.elapsed();

        self.clocks.peak_history = self.clocks.peak_history.max(self.history.len());
        self.clocks.units += 1;
        let per_frame = t_unit.elapsed().as_secs_f64() / h as f64;
        let mut out = Vec::with_capacity(emit);
        for r in 0..emit {
            out.push((self.next_frame, new_frames.row(r).to_vec()));
            self.next_frame += 1;
            self.clocks.per_frame.push(per_frame);
        }
        if self.clocks.first_frame.is_none() && !out.is_empty() {
            self.clocks.first_frame = self.clocks.first_push.map(|s| s.elapsed());
        }
        self.trim_audio();
        Ok(out)
    }

    /// Literal history: encode and quantize the most recent decoded frames.
    fn reencode(&mut self, new_frames: &Tensor) -> Result<()> {
        let model = Arc::clone(&self.model);
        let h = self.components();
        for r in 0..new_frames.rows() {
            self.decoded.push(new_frames.row(r).to_vec());
        }
        let keep = model.config.history_units() * h;
        if self.decoded.len() > keep {
            self.decoded.drain(..self.decoded.len() - keep);
        }
        let n = self.decoded.len();
        let seq = MotionSequence::new(n, model.config.codec.vertices, self.decoded.iter().flatten().copied().collect(), model.config.fps)?;
        let z = model.codec.encode(&model.store, &seq)?;
        let grid: LatentGrid = quantize(&z.reshape(&[n, model.config.codec.width])?, &self.codebook, h)?;
        let next = self.history.next_unit() + 1;
        let mut w = HistoryWindow::starting_at(self.history.capacity(), model.config.unit_dim(), next - grid.units);
        for u in 0..grid.units {
            w.push(grid.unit(u).to_vec())?;
        }
        self.history = w;
        Ok(())
    }

    fn trim_audio(&mut self) {
        let keep_from = self.history.start_unit() * self.components();
        if keep_from > self.audio_first {
            let c = self.width();
            self.audio.drain(..(keep_from - self.audio_first) * c);
            self.audio_first = keep_from;
        }
    }

    pub fn latency_report(&self) -> Result<LatencyReport> {
        if self.next_frame == 0 {
            return Err(Error::invalid("no frames emitted yet"));
        }
        let k = &self.clocks;
        Ok(LatencyReport {
            first_frame_latency: k.first_frame.map(|d| d.as_secs_f64()).unwrap_or(0.0),
            per_frame_times: k.per_frame.clone(),
            frontend_time: k.frontend.as_secs_f64(),
            predictor_time: k.predictor.as_secs_f64(),
            head_time: k.head.as_secs_f64(),
            codec_time: k.codec.as_secs_f64(),
            denoise_calls: k.denoise_calls,
            units: k.units,
            peak_history: k.peak_history,
        })
    }
}

/// Runs a whole feature sequence through a fresh session.
pub fn generate_offline(
    model: Arc<FaceModel>,
    audio: &AudioFeatureSequence,
    speaker: usize,
    seed: u64,
    runtime: &RuntimeConfig,
) -> Result<(MotionSequence, LatencyReport)> {
    if audio.frames() == 0 {
        return Err(Error::invalid("audio is empty"));
    }
    let (vertices, fps) = (model.config.codec.vertices, model.config.fps);
    let mut session = open_stream(model, speaker, seed, audio.rate, runtime)?;
    let mut frames = session.push_audio(audio)?;
    frames.extend(session.finish()?);
    let n = frames.len();
    let offsets = frames.into_iter().flat_map(|(_, f)| f).collect();
    Ok((MotionSequence::new(n, vertices, offsets, fps)?, session.latency_report()?))
}

/// Streams `audio` in chunks of `chunk_frames` feature rows.
pub fn generate_chunked(
    model: Arc<FaceModel>,
    audio: &AudioFeatureSequence,
    chunk_frames: usize,
    speaker: usize,
    seed: u64,
    runtime: &RuntimeConfig,
) -> Result<(MotionSequence, LatencyReport)> {
    if chunk_frames == 0 {
        return Err(Error::invalid("chunk size must be positive"));
    }
    let (vertices, fps) = (model.config.codec.vertices, model.config.fps);
    let mut session = open_stream(model, speaker, seed, audio.rate, runtime)?;
    let mut frames = Vec::new();
    let mut start = 0;
    while start < audio.frames() {
        let end = (start + chunk_frames).min(audio.frames());
        frames.extend(session.push_audio(&audio.slice(start, end)?)?);
        start = end;
    }
    frames.extend(session.finish()?);
    let n = frames.len();
    let offsets = frames.into_iter().flat_map(|(_, f)| f).collect();
    Ok((MotionSequence::new(n, vertices, offsets, fps)?, session.latency_report()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Profile, RunConfig};

    pub(crate) fn tiny_model() -> Arc<FaceModel> {
        let mut cfg: ModelConfig = RunConfig::for_profile(Profile::SyntheticSmall).model();
        cfg.codec.vertices = 4;
        cfg.codec.width = 8;
        cfg.codec.ff_dim = 16;
        cfg.codec.heads = 2;
        cfg.codec.components = 2;
        cfg.codec.encoder_layers = 1;
        cfg.codec.decoder_layers = 1;
        cfg.predictor.hidden = 8;
        cfg.predictor.ff_dim = 16;
        cfg.predictor.heads = 2;
        cfg.predictor.layers = 1;
        cfg.predictor.history_frames = 6;
        cfg.predictor.audio_dim = 3;
        cfg.predictor.speakers = 2;
        cfg.diffusion.num_steps = 20;
        cfg.diffusion.sample_steps = 4;
        Arc::new(FaceModel::init(&cfg, 3).unwrap())
    }

    fn audio(frames: usize) -> AudioFeatureSequence {
        AudioFeatureSequence::new(Tensor::from_fn(&[frames, 3], |i| ((i * 31 % 17) as f64 - 8.0) / 8.0), 25.0).unwrap()
    }

    #[test]
    fn fresh_session_emits_nothing() {
        let m = tiny_model();
        let mut s = open_stream(m.clone(), 0, 1, 25.0, &RuntimeConfig::default()).unwrap();
        assert!(s.latency_report().is_err());
        assert!(s.push_audio(&AudioFeatureSequence::empty(3, 25.0).unwrap()).unwrap().is_empty());
        assert_eq!(s.push_audio(&audio(2)).unwrap().len(), 2);
        assert_eq!(s.latency_report().unwrap().per_frame_times.len(), 2);
        assert!(open_stream(m.clone(), 2, 1, 25.0, &RuntimeConfig::default()).is_err());
        assert!(s.push_audio(&AudioFeatureSequence::new(Tensor::zeros(&[1, 3]), 50.0).unwrap()).is_err());
    }

    #[test]
    fn chunking_does_not_change_output() {
        let m = tiny_model();
        let a = audio(23);
        let rt = RuntimeConfig::default();
        let (whole, rep) = generate_offline(m.clone(), &a, 1, 5, &rt).unwrap();
        assert_eq!(whole.frames(), 23);
        assert_eq!(rep.per_frame_times.len(), 23);
        assert_eq!(rep.denoise_calls, 12 * 4);
        assert!(rep.peak_history <= 3);
        for chunk in [1, 2, 5, 7] {
            let (c, _) = generate_chunked(m.clone(), &a, chunk, 1, 5, &rt).unwrap();
            assert_eq!(c, whole);
        }
        let (other, _) = generate_offline(m.clone(), &a, 1, 6, &rt).unwrap();
        assert_ne!(other, whole);
    }

    #[test]
    fn resampling_doubles_frame_count() {
        let m = tiny_model();
        let a = AudioFeatureSequence::new(audio(11).features().clone(), 12.5).unwrap();
        let (out, _) = generate_offline(m, &a, 0, 5, &RuntimeConfig::default()).unwrap();
        assert_eq!(out.frames(), 21);
    }

    #[test]
    fn reencoding_path_runs() {
        let m = tiny_model();
        let rt = RuntimeConfig { reencode_history: true };
        let (out, rep) = generate_offline(m.clone(), &audio(15), 0, 2, &rt).unwrap();
        assert_eq!(out.frames(), 15);
        assert!(rep.peak_history <= 3);
        let (again, _) = generate_chunked(m, &audio(15), 4, 0, 2, &rt).unwrap();
        assert_eq!(again, out);
    }
}
