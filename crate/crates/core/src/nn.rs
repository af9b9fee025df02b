//! Transformer building blocks over the tape.
//!
//! Layers own parameter *names* only; the values live in a [`ParamStore`],
//! so the same layer description serves training and inference graphs.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{AttnExtras, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert_glorot(weight.clone(), in_dim, out_dim, rng)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert_full(b.clone(), &[out_dim], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert_full(gamma.clone(), &[dim], 1.0)?;
        store.insert_full(beta.clone(), &[dim], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::Error::invalid(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var, extras: AttnExtras<'_>) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let a = g.attention(q, k, v, self.heads, extras)?;
        self.out.forward(g, store, a)
    }
}

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, extras: AttnExtras<'_>) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, h, extras)?;
        let x = g.add(x, h)?;
        let h = self.norm_ff.forward(g, store, x)?;
        let h = self.ff.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Sinusoidal encodings of `positions`, one row each, width `dim`:
/// pairs `(sin(p / 10000^(2k/dim)), cos(p / 10000^(2k/dim)))`.
pub fn sinusoidal(positions: impl IntoIterator<Item = usize>, dim: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        rows += 1;
        for c in 0..dim {
            let k = c / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            let angle = p as f64 * freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[rows, dim], data).expect("sinusoid values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 5, true, &mut rng).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5]);
    }

    #[test]
    fn sinusoid_at_zero() {
        let t = sinusoidal([0], 6);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
