//! Transformer VQ-VAE over motion sequences.
//!
//! Frames are embedded to width `C`, run through a transformer encoder and
//! reshaped `T×C → T'×H×C` (after right-padding `T` to a multiple of `H` by
//! repeating the last frame). Each `C`-vector is snapped to its nearest
//! codebook entry. The decoder mirrors the encoder and trims padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{sinusoidal, EncoderLayer, LayerNorm, Linear};
use crate::tensor::{AttnExtras, Graph, ParamStore, Tensor, Var};

pub const CODEBOOK_PARAM: &str = "codec.codebook";
pub const ENCODER_PREFIX: &str = "codec.enc.";
pub const DECODER_PREFIX: &str = "codec.dec.";

/// Commitment weight on `‖ẑ − sg(z_q)‖²`.
pub const COMMITMENT_BETA: f64 = 0.25;

/// `N_cb` code vectors of width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 {
            return Err(Error::shape("codebook must be [size, width]"));
        }
        if entries.rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        Ok(Self { entries })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Self::new(store.value(CODEBOOK_PARAM)?.clone())
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn width(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    /// Index of the entry nearest to `z` in L2; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.size() {
            let d: f64 = self.entry(i).iter().zip(z).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// Quantized latents: `units × components × width` codes plus indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub units: usize,
    pub components: usize,
    pub width: usize,
    /// `[units, components, width]`
    pub codes: Tensor,
    /// Row-major `units × components` codebook indices.
    pub indices: Vec<usize>,
}

impl LatentGrid {
    /// Codes flattened to `[units*components, width]`.
    pub fn rows(&self) -> Tensor {
        self.codes.reshape(&[self.units * self.components, self.width]).expect("grid shape")
    }

    /// Codes of unit `u` flattened to `components*width`.
    pub fn unit(&self, u: usize) -> &[f64] {
        let n = self.components * self.width;
        &self.codes.data()[u * n..(u + 1) * n]
    }
}

/// Replaces every `C`-vector of `latents` (`[.., C]`) with its nearest codebook entry.
pub fn quantize(latents: &Tensor, codebook: &Codebook, components: usize) -> Result<LatentGrid> {
    if codebook.size() == 0 {
        return Err(Error::EmptyCodebook);
    }
    let width = latents.cols();
    if width != codebook.width() {
        return Err(Error::shape(format!("latent width {width} vs codebook width {}", codebook.width())));
    }
    let rows = latents.rows();
    if components == 0 || !rows.is_multiple_of(components) {
        return Err(Error::shape(format!("{rows} latent rows do not split into units of {components}")));
    }
    let mut indices = Vec::with_capacity(rows);
    let mut codes = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let (i, _) = codebook.nearest(latents.row(r));
        indices.push(i);
        codes.extend_from_slice(codebook.entry(i));
    }
    let units = rows / components;
    Ok(LatentGrid { units, components, width, codes: Tensor::new(&[units, components, width], codes)?, indices })
}

/// Repeats the last row of `frames` until the row count is a multiple of `h`.
pub fn pad_to_multiple(frames: &Tensor, h: usize) -> Result<Tensor> {
    let t = frames.rows();
    if t == 0 {
        return Err(Error::invalid("cannot pad an empty sequence"));
    }
    let padded = t.div_ceil(h) * h;
    if padded == t {
        return Ok(frames.clone());
    }
    let mut data = frames.to_vec();
    let last = frames.row(t - 1).to_vec();
    for _ in t..padded {
        data.extend_from_slice(&last);
    }
    Tensor::new(&[padded, frames.cols()], data)
}

/// Stage-1 objective values `(total, rec, quant)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss {
    pub total: f64,
    pub rec: f64,
    pub quant: f64,
}

/// Graph handles produced by a stage-1 forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Vars {
    pub total: Var,
    pub rec: Var,
    pub quant: Var,
    pub recon: Var,
    pub latents: Var,
}

/// How the quantizer participates in a stage-1 graph.
#[derive(Debug, Clone)]
pub enum QuantMode {
    /// Nearest-entry lookup with straight-through gradients.
    Nearest,
    /// Gradient-check surrogate: indices are pinned and the decoder input is
    /// `ẑ + offset` with a constant offset, so quantization acts as the identity.
    Pinned { indices: Vec<usize>, offset: Tensor },
}

/// Records `rec + quant` with `rec = mean|x̂ − x|` and
/// `quant = mean‖sg(ẑ) − z_q‖² + β·mean‖ẑ − sg(z_q)‖²`.
pub fn stage1_loss_graph(g: &mut Graph, x: Var, recon: Var, latents: Var, quantized: Var) -> Result<(Var, Var, Var)> {
    let rec = g.mean_abs_diff(recon, x)?;
    let sg_latents = g.detach(latents);
    let sg_quantized = g.detach(quantized);
    let codebook_term = g.mean_sq_diff(sg_latents, quantized)?;
    let commit = g.mean_sq_diff(latents, sg_quantized)?;
    let commit = g.scale(commit, COMMITMENT_BETA)?;
    let quant = g.add(codebook_term, commit)?;
    let total = g.add(rec, quant)?;
    Ok((total, rec, quant))
}

/// Value-only stage-1 loss on plain tensors.
pub fn stage1_loss(x: &Tensor, recon: &Tensor, latents: &Tensor, quantized: &Tensor) -> Result<Stage1Loss> {
    if x.shape() != recon.shape() || latents.shape() != quantized.shape() {
        return Err(Error::shape("stage1_loss operands disagree"));
    }
    let mut g = Graph::inference();
    let (xv, rv) = (g.constant(x.clone()), g.constant(recon.clone()));
    let (zv, qv) = (g.constant(latents.clone()), g.constant(quantized.clone()));
    let (total, rec, quant) = stage1_loss_graph(&mut g, xv, rv, zv, qv)?;
    Ok(Stage1Loss { total: g.value(total).item()?, rec: g.value(rec).item()?, quant: g.value(quant).item()? })
}

#[derive(Debug, Clone)]
pub struct MotionCodec {
    pub config: CodecConfig,
    enc_in: Linear,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    enc_out: Linear,
    dec_in: Linear,
    dec_layers: Vec<EncoderLayer>,
    dec_norm: LayerNorm,
    dec_out: Linear,
}

impl MotionCodec {
    /// Creates the codec and registers freshly initialized weights in `store`.
    pub fn init(config: &CodecConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let codec = Self::build(config, store, rng)?;
        store.insert_normal(CODEBOOK_PARAM, &[config.codebook_size, config.width], 0.02, rng)?;
        Ok(codec)
    }

    fn build(config: &CodecConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = config.width;
        let vdim = config.vertices * 3;
        let enc_in = Linear::new(store, "codec.enc.in", vdim, c, true, rng)?;
        let enc_layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("codec.enc.layer{i}"), c, config.ff_dim, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(store, "codec.enc.norm", c)?;
        let enc_out = Linear::new(store, "codec.enc.out", c, c, true, rng)?;
        let dec_in = Linear::new(store, "codec.dec.in", c, c, true, rng)?;
        let dec_layers = (0..config.decoder_layers)
            .map(|i| EncoderLayer::new(store, &format!("codec.dec.layer{i}"), c, config.ff_dim, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, "codec.dec.norm", c)?;
        let dec_out = Linear::new(store, "codec.dec.out", c, vdim, true, rng)?;
        Ok(Self { config: config.clone(), enc_in, enc_layers, enc_norm, enc_out, dec_in, dec_layers, dec_norm, dec_out })
    }

    /// Describes the codec layers without creating weights; `store` must
    /// already hold them (e.g. loaded from a checkpoint).
    pub fn attach(config: &CodecConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let codec = Self::build(config, &mut scratch, &mut rng)?;
        for name in scratch.names() {
            let want = scratch.value(name)?.shape();
            let have = store.value(name).map_err(|_| Error::Incompatible(format!("missing codec tensor `{name}`")))?;
            if have.shape() != want {
                return Err(Error::Incompatible(format!("`{name}` is {:?}, config expects {want:?}", have.shape())));
            }
        }
        let cb = store.value(CODEBOOK_PARAM).map_err(|_| Error::Incompatible("missing codebook".into()))?;
        if cb.shape() != [config.codebook_size, config.width] {
            return Err(Error::Incompatible(format!("codebook is {:?}", cb.shape())));
        }
        Ok(codec)
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    pub fn frame_dim(&self) -> usize {
        self.config.vertices * 3
    }

    /// Encoder over `[T, V*3]` frames already padded to a multiple of `H`.
    pub fn encode_graph(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var> {
        let t = g.shape(frames)[0];
        let h = self.enc_in.forward(g, store, frames)?;
        let pe = g.constant(sinusoidal(0..t, self.config.width));
        let mut h = g.add(h, pe)?;
        for layer in &self.enc_layers {
            h = layer.forward(g, store, h, AttnExtras::default())?;
        }
        let h = self.enc_norm.forward(g, store, h)?;
        self.enc_out.forward(g, store, h)
    }

    /// Decoder from `[T, C]` latent rows to `[T, V*3]` frames.
    pub fn decode_graph(&self, g: &mut Graph, store: &ParamStore, latents: Var) -> Result<Var> {
        let t = g.shape(latents)[0];
        if g.value(latents).cols() != self.config.width {
            return Err(Error::shape(format!("decoder expects width {}, got {:?}", self.config.width, g.shape(latents))));
        }
        let h = self.dec_in.forward(g, store, latents)?;
        let pe = g.constant(sinusoidal(0..t, self.config.width));
        let mut h = g.add(h, pe)?;
        for layer in &self.dec_layers {
            h = layer.forward(g, store, h, AttnExtras::default())?;
        }
        let h = self.dec_norm.forward(g, store, h)?;
        self.dec_out.forward(g, store, h)
    }

    fn check_vertices(&self, x: &MotionSequence) -> Result<()> {
        if x.vertices() != self.config.vertices {
            return Err(Error::shape(format!("motion has {} vertices, codec expects {}", x.vertices(), self.config.vertices)));
        }
        Ok(())
    }

    /// Continuous latents `[T', H, C]` for a motion sequence.
    pub fn encode(&self, store: &ParamStore, x: &MotionSequence) -> Result<Tensor> {
        self.check_vertices(x)?;
        let frames = pad_to_multiple(&x.to_tensor(), self.components())?;
        let rows = frames.rows();
        let mut g = Graph::inference();
        let f = g.constant(frames);
        let z = self.encode_graph(&mut g, store, f)?;
        g.value(z).reshape(&[rows / self.components(), self.components(), self.config.width])
    }

    /// Frames for a latent grid, trimmed to `frames` (or all `T'·H` rows).
    pub fn decode(&self, store: &ParamStore, grid: &LatentGrid, frames: Option<usize>, frame_rate: f64) -> Result<MotionSequence> {
        if grid.width != self.config.width || grid.components != self.components() {
            return Err(Error::shape(format!(
                "grid {}x{}x{} does not match codec (H={}, C={})",
                grid.units,
                grid.components,
                grid.width,
                self.components(),
                self.config.width
            )));
        }
        let out = self.decode_rows(store, &grid.rows())?;
        let keep = frames.unwrap_or(out.rows());
        if keep == 0 || keep > out.rows() {
            return Err(Error::invalid(format!("cannot keep {keep} of {} decoded frames", out.rows())));
        }
        MotionSequence::from_tensor(&out.slice_rows(0, keep)?, self.config.vertices, frame_rate)
    }

    /// Decoder on raw `[rows, C]` latents.
    pub fn decode_rows(&self, store: &ParamStore, latents: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let z = g.constant(latents.clone());
        let out = self.decode_graph(&mut g, store, z)?;
        Ok(g.value(out).clone())
    }

    /// Encode, quantize and decode; returns the reconstruction and the grid.
    pub fn reconstruct(&self, store: &ParamStore, x: &MotionSequence) -> Result<(MotionSequence, LatentGrid)> {
        let z = self.encode(store, x)?;
        let grid = quantize(&z, &Codebook::from_store(store)?, self.components())?;
        let recon = self.decode(store, &grid, Some(x.frames()), x.frame_rate)?;
        Ok((recon, grid))
    }

    /// Records the full stage-1 graph on `frames` (`[T, V*3]`).
    pub fn stage1_graph(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor, mode: &QuantMode) -> Result<Stage1Vars> {
        if frames.cols() != self.frame_dim() {
            return Err(Error::shape(format!("frames width {} vs {}", frames.cols(), self.frame_dim())));
        }
        let t = frames.rows();
        let padded = pad_to_multiple(frames, self.components())?;
        let x_in = g.constant(padded);
        let latents = self.encode_graph(g, store, x_in)?;
        let codebook = g.param(store, CODEBOOK_PARAM)?;
        let (quantized, decoder_in) = match mode {
            QuantMode::Nearest => {
                let cb = Codebook::new(g.value(codebook).clone())?;
                let grid = quantize(g.value(latents), &cb, self.components())?;
                let quantized = g.gather_rows(codebook, &grid.indices)?;
                let st = g.straight_through(latents, g.value(quantized).clone())?;
                (quantized, st)
            }
            QuantMode::Pinned { indices, offset } => {
                let quantized = g.gather_rows(codebook, indices)?;
                let off = g.constant(offset.clone());
                let shifted = g.add(latents, off)?;
                (quantized, shifted)
            }
        };
        let recon_full = self.decode_graph(g, store, decoder_in)?;
        let recon = g.slice_rows(recon_full, 0, t)?;
        let x = g.constant(frames.clone());
        let (total, rec, quant) = stage1_loss_graph(g, x, recon, latents, quantized)?;
        Ok(Stage1Vars { total, rec, quant, recon, latents })
    }
}
