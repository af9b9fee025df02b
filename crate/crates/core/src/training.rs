//! Two-stage training.
//!
//! Both stages iterate over the same fixed set of crops: each crop spans up
//! to `h_units + 1` latent units and crops start every `window_stride_units`
//! units. Stage 1 fits the codec on the crops; stage 2 freezes the encoder
//! and codebook, quantizes each crop once, and trains the predictor and head
//! with teacher forcing (decoder weights optional).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::resample_to_frames;
use crate::codec::{quantize, Codebook, QuantMode, Stage1Loss, CODEBOOK_PARAM, DECODER_PREFIX, ENCODER_PREFIX};
use crate::config::TrainConfig;
use crate::diffusion::add_noise;
use crate::error::{Error, Result};
use crate::model::{FaceModel, CODEC_PREFIX};
use crate::motion::MotionSequence;
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::Sample;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// A crop of one sequence: frames `[start_frame, start_frame + frames)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub sample: usize,
    pub start_frame: usize,
    pub frames: usize,
    /// Latent units covered (the last may be partial).
    pub units: usize,
}

/// Unit-aligned crops of a `frames`-long sequence; the tail is always covered.
pub fn crop_starts(frames: usize, components: usize, span_units: usize, stride_units: usize) -> Vec<(usize, usize)> {
    let total_units = frames.div_ceil(components);
    let span = span_units.min(total_units).max(1);
    let stride = stride_units.max(1);
    let mut starts: Vec<usize> = (0..).step_by(stride).take_while(|s| s + span <= total_units).collect();
    let last = total_units - span;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts.into_iter().map(|s| (s, span)).collect()
}

pub fn make_crops(data: &[Sample], components: usize, history_units: usize, stride_units: usize) -> Vec<Crop> {
    let mut out = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let t = s.motion.frames();
        for (unit, span) in crop_starts(t, components, history_units + 1, stride_units) {
            let start = unit * components;
            let end = ((unit + span) * components).min(t);
            out.push(Crop { sample: i, start_frame: start, frames: end - start, units: span });
        }
    }
    out
}

fn crop_motion(data: &[Sample], c: &Crop) -> Result<MotionSequence> {
    data[c.sample].motion.slice(c.start_frame, c.start_frame + c.frames)
}

fn check_data(data: &[Sample], model: &FaceModel) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = data.iter().find(|s| s.motion.vertices() != model.config.codec.vertices) {
        return Err(Error::shape(format!(
            "`{}` has {} vertices, model expects {}",
            s.spec.id,
            s.motion.vertices(),
            model.config.codec.vertices
        )));
    }
    Ok(())
}

/// Stage-1 learning rate for `epoch`: halves every `interval` epochs.
pub fn halved_lr(base: f64, epoch: usize, interval: usize) -> f64 {
    match epoch.checked_div(interval) {
        Some(halvings) => base * 0.5f64.powi(halvings as i32),
        None => base,
    }
}

fn only_trainable(store: &mut ParamStore, prefixes: &[&str]) {
    store.set_trainable_prefix("", false);
    for p in prefixes {
        store.set_trainable_prefix(p, true);
    }
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch, step, loss: f64::NAN },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: Stage1Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    /// Mean loss over all crops before any update.
    pub initial: Stage1Loss,
    pub history: Vec<Stage1Epoch>,
}

fn mean_losses(ls: &[Stage1Loss]) -> Stage1Loss {
    let n = ls.len() as f64;
    Stage1Loss {
        total: ls.iter().map(|l| l.total).sum::<f64>() / n,
        rec: ls.iter().map(|l| l.rec).sum::<f64>() / n,
        quant: ls.iter().map(|l| l.quant).sum::<f64>() / n,
    }
}

/// Mean stage-1 loss of the codec over `crops`, without updates.
pub fn evaluate_stage1(model: &FaceModel, data: &[Sample], crops: &[Crop]) -> Result<Stage1Loss> {
    let mut ls = Vec::with_capacity(crops.len());
    for c in crops {
        let mut g = Graph::inference();
        let x = crop_motion(data, c)?.to_tensor();
        let v = model.codec.stage1_graph(&mut g, &model.store, &x, &QuantMode::Nearest)?;
        ls.push(Stage1Loss { total: g.value(v.total).item()?, rec: g.value(v.rec).item()?, quant: g.value(v.quant).item()? });
    }
    Ok(mean_losses(&ls))
}

/// Trains encoder, decoder and codebook; other weights are untouched.
pub fn train_stage1(model: &mut FaceModel, data: &[Sample], config: &TrainConfig) -> Result<Stage1Report> {
    config.validate()?;
    check_data(data, model)?;
    let crops = make_crops(data, model.codec.components(), model.config.history_units(), config.window_stride_units);
    let initial = evaluate_stage1(model, data, &crops)?;
    only_trainable(&mut model.store, &[CODEC_PREFIX]);
    let mut opt = AdamW::new(AdamWConfig { lr: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() });
    let mut order: Vec<usize> = (0..crops.len()).collect();
    let mut history = Vec::with_capacity(config.stage1_epochs);
    let result = (|| {
        for epoch in 0..config.stage1_epochs {
            let lr = halved_lr(config.learning_rate, epoch, config.lr_halving_interval);
            opt.set_lr(lr);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ ((epoch as u64 + 1) << 20)));
            let mut losses = vec![Stage1Loss { total: 0.0, rec: 0.0, quant: 0.0 }; crops.len()];
            for (step, &ci) in order.iter().enumerate() {
                let x = crop_motion(data, &crops[ci])?.to_tensor();
                let mut g = Graph::new();
                let v = model.codec.stage1_graph(&mut g, &model.store, &x, &QuantMode::Nearest).map_err(|e| diverged(epoch, step, e))?;
                let total = g.value(v.total).item()?;
                if !total.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: total });
                }
                losses[ci] = Stage1Loss { total, rec: g.value(v.rec).item()?, quant: g.value(v.quant).item()? };
                model.store.zero_grad();
                g.backward_into(v.total, &mut model.store).map_err(|e| diverged(epoch, step, e))?;
                opt.step(&mut model.store);
            }
            let loss = mean_losses(&losses);
            log::info!("stage1 epoch {epoch}: total {:.5} rec {:.5} quant {:.5}", loss.total, loss.rec, loss.quant);
            history.push(Stage1Epoch { epoch, lr, loss });
        }
        Ok(())
    })();
    model.store.set_trainable_prefix("", true);
    result?;
    Ok(Stage1Report { initial, history })
}

pub fn stage1_csv(report: &Stage1Report) -> String {
    let mut s = String::from("epoch,lr,total,rec,quant\n");
    for e in &report.history {
        writeln!(s, "{},{:e},{:e},{:e},{:e}", e.epoch, e.lr, e.loss.total, e.loss.rec, e.loss.quant).expect("string write");
    }
    s
}

/// Stage-2 loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Loss {
    pub total: f64,
    pub latent: f64,
    pub vert: f64,
    pub vel: f64,
}

/// `(total, latent, vert, vel)` on the tape. `x_pred`, `x` are `[T, V*3]`.
pub fn stage2_loss_graph(g: &mut Graph, z_pred: Var, z_q: Var, x_pred: Var, x: Var) -> Result<[Var; 4]> {
    if g.shape(z_pred) != g.shape(z_q) || g.shape(x_pred) != g.shape(x) {
        return Err(Error::shape(format!(
            "latents {:?} vs {:?}, frames {:?} vs {:?}",
            g.shape(z_pred),
            g.shape(z_q),
            g.shape(x_pred),
            g.shape(x)
        )));
    }
    let latent = g.mean_abs_diff(z_pred, z_q)?;
    let vert = g.mean_sq_diff(x_pred, x)?;
    let t = g.shape(x)[0];
    let vel = if t >= 2 {
        let (a1, a0) = (g.slice_rows(x_pred, 1, t)?, g.slice_rows(x_pred, 0, t - 1)?);
        let (b1, b0) = (g.slice_rows(x, 1, t)?, g.slice_rows(x, 0, t - 1)?);
        let dp = g.sub(a1, a0)?;
        let dx = g.sub(b1, b0)?;
        g.mean_sq_diff(dp, dx)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = g.add(latent, vert)?;
    let total = g.add(total, vel)?;
    Ok([total, latent, vert, vel])
}

pub fn stage2_loss(z_pred: &Tensor, z_q: &Tensor, x_pred: &Tensor, x: &Tensor) -> Result<Stage2Loss> {
    let mut g = Graph::inference();
    let vars = [z_pred, z_q, x_pred, x].map(|t| g.constant(t.clone()));
    let [total, latent, vert, vel] = stage2_loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    Ok(Stage2Loss {
        total: g.value(total).item()?,
        latent: g.value(latent).item()?,
        vert: g.value(vert).item()?,
        vel: g.value(vel).item()?,
    })
}

/// A crop prepared for stage 2: frozen-encoder codes and aligned audio.
#[derive(Debug, Clone)]
pub struct Stage2Window {
    pub crop: Crop,
    pub speaker: usize,
    /// `[frames, V*3]`
    pub frames: Tensor,
    /// `[units, H*C]`
    pub codes: Tensor,
    /// `[units*H, C_a]`
    pub audio: Tensor,
}

/// Audio resampled to the motion frame count.
pub fn aligned_audio(sample: &Sample) -> Result<Tensor> {
    resample_to_frames(&sample.audio, sample.motion.frames())
}

fn pad_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    if t.rows() >= rows {
        return t.slice_rows(0, rows);
    }
    let last = t.slice_rows(t.rows() - 1, t.rows())?;
    let mut parts = vec![t.clone()];
    parts.extend(std::iter::repeat_n(last, rows - t.rows()));
    Tensor::concat_rows(&parts)
}

pub fn prepare_stage2(model: &FaceModel, data: &[Sample], stride_units: usize) -> Result<Vec<Stage2Window>> {
    check_data(data, model)?;
    let h = model.codec.components();
    let codebook = Codebook::from_store(&model.store)?;
    let speakers = model.predictor.style.speakers;
    let aligned: Vec<Tensor> = data.iter().map(aligned_audio).collect::<Result<_>>()?;
    make_crops(data, h, model.config.history_units(), stride_units)
        .into_iter()
        .map(|crop| {
            let sample = &data[crop.sample];
            if sample.spec.speaker >= speakers {
                return Err(Error::invalid(format!(
                    "`{}` uses speaker {} outside the {speakers} trained styles",
                    sample.spec.id, sample.spec.speaker
                )));
            }
            let motion = crop_motion(data, &crop)?;
            let z = model.codec.encode(&model.store, &motion)?;
            let grid = quantize(&z.reshape(&[z.shape()[0] * h, z.shape()[2]])?, &codebook, h)?;
            let codes = grid.codes.reshape(&[grid.units, h * grid.width])?;
            let audio = aligned[crop.sample].slice_rows(crop.start_frame, crop.start_frame + crop.frames)?;
            Ok(Stage2Window {
                crop,
                speaker: sample.spec.speaker,
                frames: motion.to_tensor(),
                codes,
                audio: pad_rows(&audio, crop.units * h)?,
            })
        })
        .collect()
}

/// Draws `(t, z_t)` for every unit of `codes`.
pub fn noised_units(model: &FaceModel, codes: &Tensor, rng: &mut impl Rng) -> Result<(Vec<usize>, Tensor)> {
    let n = model.schedule.num_steps();
    let (rows, w) = (codes.rows(), codes.cols());
    let mut ts = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        let t = rng.gen_range(0..n);
        let eps = Tensor::from_fn(&[w], |_| rng.sample(StandardNormal));
        let z0 = Tensor::new(&[w], codes.row(r).to_vec())?;
        out.extend(add_noise(&model.schedule, &z0, t, &eps)?.into_vec());
        ts.push(t);
    }
    Ok((ts, Tensor::new(&[rows, w], out)?))
}

/// Vars of one teacher-forced stage-2 step.
pub struct Stage2Vars {
    pub losses: [Var; 4],
    pub z_pred: Var,
    pub x_pred: Var,
}

pub fn stage2_graph(model: &FaceModel, g: &mut Graph, w: &Stage2Window, ts: &[usize], z_t: &Tensor) -> Result<Stage2Vars> {
    let units = w.codes.rows();
    let h = model.codec.components();
    let history = if units > 1 { Some(g.constant(w.codes.slice_rows(0, units - 1)?)) } else { None };
    let cond = model.predictor.condition_graph(g, &model.store, history, &w.audio, 0, w.speaker)?;
    let zt = g.constant(z_t.clone());
    let z_pred = model.head.denoise_graph(g, &model.store, zt, cond, ts)?;
    let rows = g.reshape(z_pred, &[units * h, model.config.codec.width])?;
    let decoded = model.codec.decode_graph(g, &model.store, rows)?;
    let x_pred = g.slice_rows(decoded, 0, w.frames.rows())?;
    let zq = g.constant(w.codes.clone());
    let x = g.constant(w.frames.clone());
    let losses = stage2_loss_graph(g, z_pred, zq, x_pred, x)?;
    Ok(Stage2Vars { losses, z_pred, x_pred })
}

fn window_rng(seed: u64, epoch: usize, window: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ window as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: Stage2Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    pub history: Vec<Stage2Epoch>,
}

fn mean2(ls: &[Stage2Loss]) -> Stage2Loss {
    let n = ls.len() as f64;
    Stage2Loss {
        total: ls.iter().map(|l| l.total).sum::<f64>() / n,
        latent: ls.iter().map(|l| l.latent).sum::<f64>() / n,
        vert: ls.iter().map(|l| l.vert).sum::<f64>() / n,
        vel: ls.iter().map(|l| l.vel).sum::<f64>() / n,
    }
}

/// Mean stage-2 losses over `windows` with noise drawn from `seed`.
pub fn evaluate_stage2(model: &FaceModel, windows: &[Stage2Window], seed: u64) -> Result<Stage2Loss> {
    let mut ls = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let (ts, zt) = noised_units(model, &w.codes, &mut window_rng(seed, usize::MAX, i))?;
        let mut g = Graph::inference();
        let v = stage2_graph(model, &mut g, w, &ts, &zt)?;
        let [t, l, vr, vl] = v.losses.map(|x| g.value(x).item().unwrap_or(f64::NAN));
        ls.push(Stage2Loss { total: t, latent: l, vert: vr, vel: vl });
    }
    Ok(mean2(&ls))
}

/// Trains predictor and head (and the decoder when `finetune_decoder`).
pub fn train_stage2(model: &mut FaceModel, data: &[Sample], config: &TrainConfig) -> Result<Stage2Report> {
    config.validate()?;
    let windows = prepare_stage2(model, data, config.window_stride_units)?;
    let mut trainable = vec!["pred.", "head."];
    if config.finetune_decoder {
        trainable.push(DECODER_PREFIX);
    }
    only_trainable(&mut model.store, &trainable);
    let mut opt = AdamW::new(AdamWConfig { lr: config.stage2_lr(), weight_decay: config.weight_decay, ..Default::default() });
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(config.stage2_epochs);
    let result = (|| {
        for epoch in 0..config.stage2_epochs {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5 ^ ((epoch as u64 + 1) << 20)));
            let mut losses = vec![Stage2Loss { total: 0.0, latent: 0.0, vert: 0.0, vel: 0.0 }; windows.len()];
            for (step, &wi) in order.iter().enumerate() {
                let w = &windows[wi];
                let (ts, zt) = noised_units(model, &w.codes, &mut window_rng(config.seed, epoch, wi))?;
                let mut g = Graph::new();
                let v = stage2_graph(model, &mut g, w, &ts, &zt).map_err(|e| diverged(epoch, step, e))?;
                let [t, l, vr, vl] = v.losses.map(|x| g.value(x).item().unwrap_or(f64::NAN));
                if !t.is_finite() {
                    return Err(Error::Divergence { epoch, step, loss: t });
                }
                losses[wi] = Stage2Loss { total: t, latent: l, vert: vr, vel: vl };
                model.store.zero_grad();
                g.backward_into(v.losses[0], &mut model.store).map_err(|e| diverged(epoch, step, e))?;
                opt.step(&mut model.store);
            }
            let loss = mean2(&losses);
            log::info!("stage2 epoch {epoch}: total {:.5} latent {:.5} vert {:.5} vel {:.5}", loss.total, loss.latent, loss.vert, loss.vel);
            history.push(Stage2Epoch { epoch, loss });
        }
        Ok(())
    })();
    model.store.set_trainable_prefix("", true);
    result?;
    Ok(Stage2Report { history })
}

pub fn stage2_csv(report: &Stage2Report) -> String {
    let mut s = String::from("epoch,total,latent,vert,vel\n");
    for e in &report.history {
        let l = e.loss;
        writeln!(s, "{},{:e},{:e},{:e},{:e}", e.epoch, l.total, l.latent, l.vert, l.vel).expect("string write");
    }
    s
}

pub fn write_csv(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Names whose values must not change during stage 2.
pub fn frozen_in_stage2(store: &ParamStore) -> Vec<String> {
    store.names().filter(|n| n.starts_with(ENCODER_PREFIX) || *n == CODEBOOK_PARAM).map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crops_cover_the_tail() {
        assert_eq!(
            crop_starts(240, 4, 13, 6),
            vec![(0, 13), (6, 13), (12, 13), (18, 13), (24, 13), (30, 13), (36, 13), (42, 13), (47, 13)]
        );
        assert_eq!(crop_starts(10, 4, 13, 6), vec![(0, 3)]);
        assert_eq!(crop_starts(8, 4, 2, 1), vec![(0, 2)]);
    }

    #[test]
    fn lr_halves() {
        assert_eq!(halved_lr(1.0, 19, 20), 1.0);
        assert_eq!(halved_lr(1.0, 20, 20), 0.5);
        assert_eq!(halved_lr(1.0, 45, 20), 0.25);
        assert_eq!(halved_lr(1.0, 45, 0), 1.0);
    }

    #[test]
    fn stage2_loss_cases() {
        let z = Tensor::from_fn(&[2, 3], |i| i as f64);
        let x = Tensor::from_fn(&[3, 2], |i| (i * i) as f64);
        let l = stage2_loss(&z, &z, &x, &x).unwrap();
        assert_eq!((l.total, l.latent, l.vert, l.vel), (0.0, 0.0, 0.0, 0.0));
        let shifted = Tensor::from_fn(&[3, 2], |i| (i * i) as f64 + 0.5);
        let l = stage2_loss(&z, &z, &shifted, &x).unwrap();
        assert_eq!(l.vel, 0.0);
        assert_eq!(l.vert, 0.25);
        assert!(stage2_loss(&z, &x, &x, &x).is_err());
    }
}
