//! Autoregressive condition predictor: a transformer decoder over a bounded
//! window of past latent units, cross-attending to frame-aligned audio.
//!
//! Token `p` of the input is the begin token (`p = 0`) or window unit `p−1`;
//! its output conditions window unit `p`, so the last token always conditions
//! the next unseen unit. Token `p` sees audio frames `[p·H, (p+1)·H)` past
//! the window start.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::StyleProjection;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{AttnExtras, Graph, Mask, ParamStore, Tensor, Var};

pub const PREDICTOR_PREFIX: &str = "pred.";
const BEGIN_PARAM: &str = "pred.begin";

/// Ring buffer of the most recent latent units (each `H·C` values).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    units: VecDeque<Vec<f64>>,
    capacity: usize,
    unit_dim: usize,
    /// Absolute index of the oldest held unit.
    start_unit: usize,
}

impl HistoryWindow {
    pub fn new(capacity: usize, unit_dim: usize) -> Self {
        Self { units: VecDeque::with_capacity(capacity), capacity, unit_dim, start_unit: 0 }
    }

    /// Empty window whose first unit will have absolute index `start_unit`.
    pub fn starting_at(capacity: usize, unit_dim: usize, start_unit: usize) -> Self {
        Self { start_unit, ..Self::new(capacity, unit_dim) }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn start_unit(&self) -> usize {
        self.start_unit
    }

    /// Absolute index of the unit the next prediction is for.
    pub fn next_unit(&self) -> usize {
        self.start_unit + self.units.len()
    }

    pub fn units(&self) -> impl Iterator<Item = &[f64]> {
        self.units.iter().map(Vec::as_slice)
    }

    pub fn push(&mut self, unit: Vec<f64>) -> Result<()> {
        if unit.len() != self.unit_dim {
            return Err(Error::shape(format!("unit of {} values, window holds {}", unit.len(), self.unit_dim)));
        }
        if self.capacity == 0 {
            self.start_unit += 1;
            return Ok(());
        }
        if self.units.len() == self.capacity {
            self.units.pop_front();
            self.start_unit += 1;
        }
        self.units.push_back(unit);
        Ok(())
    }

    /// `[len, H·C]`, or `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.units.is_empty() {
            return None;
        }
        let data = self.units.iter().flatten().copied().collect();
        Some(Tensor::new(&[self.units.len(), self.unit_dim], data).expect("units are finite"))
    }
}

/// The most recent `⌈h_frames/H⌉` of `past` (all of them if fewer).
pub fn select_history(past: &[Vec<f64>], h_frames: usize, components: usize, unit_dim: usize) -> Result<HistoryWindow> {
    if components == 0 || h_frames < components {
        return Err(Error::invalid(format!("history of {h_frames} frames is shorter than one {components}-frame unit")));
    }
    let cap = h_frames.div_ceil(components);
    let skip = past.len().saturating_sub(cap);
    let mut w = HistoryWindow::new(cap, unit_dim);
    for u in &past[skip..] {
        w.push(u.clone())?;
    }
    w.start_unit = skip;
    Ok(w)
}

/// Per-head slopes `2^(−8(k+1)/heads)`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (0..heads).map(|k| 2f64.powf(-8.0 * (k + 1) as f64 / heads as f64)).collect()
}

/// `[heads, L, L]` with `bias[k][i][j] = −m_k·(i−j)` for `j ≤ i`, 0 above the diagonal.
pub fn alibi_bias(length: usize, heads: usize) -> Result<Tensor> {
    if heads == 0 {
        return Err(Error::invalid("ALiBi needs at least one head"));
    }
    let slopes = alibi_slopes(heads);
    let mut data = Vec::with_capacity(heads * length * length);
    for m in &slopes {
        for i in 0..length {
            for j in 0..length {
                data.push(if j <= i { -m * (i - j) as f64 } else { 0.0 });
            }
        }
    }
    Tensor::new(&[heads, length, length], data)
}

/// Token `i` may attend audio rows `[start + i·H, start + (i+1)·H)`.
pub fn alignment_mask(tokens: usize, audio_frames: usize, components: usize, start_frame: usize) -> Result<Mask> {
    let needed = start_frame + tokens * components;
    if audio_frames < needed {
        return Err(Error::AudioUnderrun { needed, available: audio_frames });
    }
    Ok(Mask::from_fn(tokens, audio_frames, |i, j| j >= start_frame + i * components && j < start_frame + (i + 1) * components))
}

/// One condition row per token; row `len−1` conditions the next unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSequence {
    /// `[L, D]`
    pub conditions: Tensor,
}

impl ConditionSequence {
    pub fn len(&self) -> usize {
        self.conditions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self) -> &[f64] {
        self.conditions.row(self.len() - 1)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ff_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, dim, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        audio: Var,
        self_extras: AttnExtras<'_>,
        cross: AttnExtras<'_>,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, store, x)?;
        let h = self.self_attn.forward(g, store, h, h, self_extras)?;
        let x = g.add(x, h)?;
        let h = self.norm_cross.forward(g, store, x)?;
        let h = self.cross_attn.forward(g, store, h, audio, cross)?;
        let x = g.add(x, h)?;
        let h = self.norm_ff.forward(g, store, x)?;
        let h = self.ff.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct ConditionPredictor {
    pub style: StyleProjection,
    unit_in: Linear,
    audio_in: Linear,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    pub hidden: usize,
    pub heads: usize,
    pub components: usize,
    pub unit_dim: usize,
    pub audio_dim: usize,
    pub history_units: usize,
}

impl ConditionPredictor {
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let p = &config.predictor;
        let d = p.hidden;
        let style = StyleProjection::new(store, "pred.style", p.speakers, d, rng)?;
        store.insert_normal(BEGIN_PARAM, &[1, d], 0.02, rng)?;
        let unit_in = Linear::new(store, "pred.unit_in", config.unit_dim(), d, true, rng)?;
        let audio_in = Linear::new(store, "pred.audio_in", p.audio_dim, d, true, rng)?;
        let layers = (0..p.layers)
            .map(|i| DecoderLayer::new(store, &format!("pred.layer{i}"), d, p.ff_dim, p.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "pred.norm", d)?;
        Ok(Self {
            style,
            unit_in,
            audio_in,
            layers,
            norm,
            hidden: d,
            heads: p.heads,
            components: config.codec.components,
            unit_dim: config.unit_dim(),
            audio_dim: p.audio_dim,
            history_units: config.history_units(),
        })
    }

    /// Describes the predictor over weights already present in `store`.
    pub fn attach(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let pred = Self::init(config, &mut scratch, &mut ChaCha8Rng::seed_from_u64(0))?;
        for name in scratch.names() {
            let have = store.value(name).map_err(|_| Error::Incompatible(format!("missing predictor tensor `{name}`")))?;
            if have.shape() != scratch.value(name)?.shape() {
                return Err(Error::Incompatible(format!("`{name}` is {:?}", have.shape())));
            }
        }
        Ok(pred)
    }

    /// Conditions for `[begin, units..]` on the tape. `audio` rows are motion
    /// frames; `start_frame` is the row where the window's first unit begins.
    pub fn condition_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        units: Option<Var>,
        audio: &Tensor,
        start_frame: usize,
        speaker: usize,
    ) -> Result<Var> {
        if audio.shape().len() != 2 || audio.cols() != self.audio_dim {
            return Err(Error::shape(format!("audio {:?}, predictor expects width {}", audio.shape(), self.audio_dim)));
        }
        let n_units = match units {
            Some(u) => {
                if g.shape(u).len() != 2 || g.shape(u)[1] != self.unit_dim {
                    return Err(Error::shape(format!("units {:?}, expected [n, {}]", g.shape(u), self.unit_dim)));
                }
                g.shape(u)[0]
            }
            None => 0,
        };
        let tokens = n_units + 1;
        let h = self.components;
        let mask = alignment_mask(tokens, audio.rows(), h, start_frame)?;
        let span = audio.slice_rows(start_frame, start_frame + tokens * h)?;
        let local = Mask::from_fn(tokens, span.rows(), |i, j| mask.allows(i, j + start_frame));

        let style = self.style.forward(g, store, speaker)?;
        let begin = g.param(store, BEGIN_PARAM)?;
        let mut x = g.add(begin, style)?;
        if let Some(u) = units {
            let e = self.unit_in.forward(g, store, u)?;
            let e = g.add_row(e, style)?;
            x = g.concat_rows(&[x, e])?;
        }
        let a = g.constant(span);
        let a = self.audio_in.forward(g, store, a)?;
        let pe = g.constant(sinusoidal((0..tokens * h).map(|f| (start_frame + f) % h), self.hidden));
        let a = g.add(a, pe)?;

        let bias = alibi_bias(tokens, self.heads)?;
        let causal = Mask::causal(tokens);
        let self_extras = AttnExtras { bias: Some(&bias), mask: Some(&causal) };
        let cross = AttnExtras { bias: None, mask: Some(&local) };
        for layer in &self.layers {
            x = layer.forward(g, store, x, a, self_extras, cross)?;
        }
        self.norm.forward(g, store, x)
    }

    /// Inference over a history window; `audio` rows are absolute frames
    /// starting at `audio_first_frame`.
    pub fn predict_condition(
        &self,
        store: &ParamStore,
        window: &HistoryWindow,
        audio: &Tensor,
        audio_first_frame: usize,
        speaker: usize,
    ) -> Result<ConditionSequence> {
        let start = window.start_unit() * self.components;
        if start < audio_first_frame {
            return Err(Error::invalid(format!("audio before frame {audio_first_frame} was discarded, window starts at {start}")));
        }
        let mut g = Graph::inference();
        let units = window.to_tensor().map(|t| g.constant(t));
        let c = self.condition_graph(&mut g, store, units, audio, start - audio_first_frame, speaker)?;
        Ok(ConditionSequence { conditions: g.value(c).clone() })
    }
}
