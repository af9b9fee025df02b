//! Scaled-linear noise schedule, the x0-predicting MLP head, and the
//! deterministic DDIM sampler.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn from_config(config: &DiffusionConfig) -> Result<Self> {
        build_schedule(config.num_steps, config.beta_start, config.beta_end)
    }
}

/// `β_t = (√b0 + t/(N−1)·(√b1 − √b0))²`, `ᾱ_t = Π_{s≤t}(1 − β_s)`.
pub fn build_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::invalid("a schedule needs at least two steps"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1")));
    }
    let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
    let last = (num_steps - 1) as f64;
    let mut beta: Vec<f64> = (0..num_steps).map(|t| (s0 + t as f64 / last * (s1 - s0)).powi(2)).collect();
    beta[0] = beta_start;
    beta[num_steps - 1] = beta_end;
    let mut alpha_bar = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(schedule: &NoiseSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if t >= schedule.num_steps() {
        return Err(Error::invalid(format!("timestep {t} outside 0..{}", schedule.num_steps())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!("noise {:?} vs latents {:?}", eps.shape(), z0.shape())));
    }
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Tensor::new(z0.shape(), z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect())
}

/// Pre-projection time features: `(sin(t/10000^(2k/C)), cos(t/10000^(2k/C)))` pairs.
pub fn time_features(t: usize, width: usize) -> Tensor {
    sinusoidal([t], width)
}

/// Descending timesteps `N−1 − ⌊i·N/steps⌋` for `i < steps`.
pub fn ddim_timesteps(num_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_steps {
        return Err(Error::invalid(format!("sampling steps must be in 1..={num_steps}, got {steps}")));
    }
    Ok((0..steps).map(|i| num_steps - 1 - i * num_steps / steps).collect())
}

/// Anything that maps `(z_t, t, cond)` to a clean-sample estimate.
pub trait Denoiser {
    fn denoise(&self, z_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimSample {
    pub z0: Vec<f64>,
    pub denoise_calls: usize,
}

/// Deterministic DDIM (η = 0) from seeded unit Gaussian noise of length `dim`.
pub fn ddim_sample(
    denoiser: &impl Denoiser,
    schedule: &NoiseSchedule,
    cond: &[f64],
    dim: usize,
    steps: usize,
    seed: u64,
) -> Result<DdimSample> {
    let ts = ddim_timesteps(schedule.num_steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for (i, &t) in ts.iter().enumerate() {
        let x0 = denoiser.denoise(&z, t, cond)?;
        if x0.len() != dim {
            return Err(Error::shape(format!("denoiser returned {} values, expected {dim}", x0.len())));
        }
        if i + 1 == ts.len() {
            return Ok(DdimSample { z0: x0, denoise_calls: i + 1 });
        }
        let ab = schedule.alpha_bar[t];
        let ab_prev = schedule.alpha_bar[ts[i + 1]];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (zi, x) in z.iter_mut().zip(&x0) {
            let eps = (*zi - sa * x) / sb;
            *zi = pa * x + pb * eps;
        }
    }
    unreachable!("timestep list is non-empty")
}

/// Single-hidden-layer MLP over `[z_t ⊕ cond ⊕ E_t(t)]`.
#[derive(Debug, Clone)]
pub struct DiffusionHead {
    time: Linear,
    hidden: Linear,
    out: Linear,
    pub unit_dim: usize,
    pub cond_dim: usize,
}

impl DiffusionHead {
    pub fn init(store: &mut ParamStore, unit_dim: usize, cond_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let time = Linear::new(store, "head.time", cond_dim, cond_dim, true, rng)?;
        let hidden = Linear::new(store, "head.hidden", unit_dim + 2 * cond_dim, cond_dim, true, rng)?;
        let out = Linear::new(store, "head.out", cond_dim, unit_dim, true, rng)?;
        Ok(Self { time, hidden, out, unit_dim, cond_dim })
    }

    pub fn attach(store: &ParamStore, unit_dim: usize, cond_dim: usize) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let head = Self::init(&mut scratch, unit_dim, cond_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
        for name in scratch.names() {
            let have = store.value(name).map_err(|_| Error::Incompatible(format!("missing head tensor `{name}`")))?;
            if have.shape() != scratch.value(name)?.shape() {
                return Err(Error::Incompatible(format!("`{name}` is {:?}", have.shape())));
            }
        }
        Ok(head)
    }

    /// Learned time embedding rows for `ts`.
    pub fn time_embedding_graph(&self, g: &mut Graph, store: &ParamStore, ts: &[usize]) -> Result<Var> {
        let feats = g.constant(sinusoidal(ts.iter().copied(), self.cond_dim));
        self.time.forward(g, store, feats)
    }

    /// Row-batched denoiser: `z_t` `[n, H·C]`, `cond` `[n, D]`, one timestep per row.
    pub fn denoise_graph(&self, g: &mut Graph, store: &ParamStore, z_t: Var, cond: Var, ts: &[usize]) -> Result<Var> {
        let (zs, cs) = (g.shape(z_t).to_vec(), g.shape(cond).to_vec());
        if zs.len() != 2 || zs[1] != self.unit_dim || cs.len() != 2 || cs[1] != self.cond_dim {
            return Err(Error::shape(format!(
                "head expects [n,{}] latents and [n,{}] conditions, got {zs:?} and {cs:?}",
                self.unit_dim, self.cond_dim
            )));
        }
        if zs[0] != cs[0] || zs[0] != ts.len() {
            return Err(Error::shape(format!("{} latents, {} conditions, {} timesteps", zs[0], cs[0], ts.len())));
        }
        let te = self.time_embedding_graph(g, store, ts)?;
        let x = g.concat_cols(&[z_t, cond, te])?;
        let h = self.hidden.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }

    pub fn denoise(&self, store: &ParamStore, z_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let z = g.constant(Tensor::new(&[1, z_t.len()], z_t.to_vec())?);
        let c = g.constant(Tensor::new(&[1, cond.len()], cond.to_vec())?);
        let out = self.denoise_graph(&mut g, store, z, c, &[t])?;
        Ok(g.value(out).to_vec())
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundHead<'a> {
        BoundHead { head: self, store, calls: Cell::new(0) }
    }
}

/// A head paired with its weights, counting denoiser invocations.
pub struct BoundHead<'a> {
    head: &'a DiffusionHead,
    store: &'a ParamStore,
    calls: Cell<usize>,
}

impl BoundHead<'_> {
    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Denoiser for BoundHead<'_> {
    fn denoise(&self, z_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.head.denoise(self.store, z_t, t, cond)
    }
}
