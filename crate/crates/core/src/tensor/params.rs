use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::array::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named parameters with same-shaped gradient accumulators.
///
/// Iteration order is the lexicographic order of names, which keeps
/// checkpoints and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let grad = vec![0.0; value.numel()];
        self.params.insert(name, Param { value, grad, trainable: true });
        Ok(())
    }

    /// Glorot (fan-based) uniform initialization for a `[fan_in, fan_out]` weight.
    pub fn insert_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng));
        self.insert(name, t)
    }

    pub fn insert_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, t)
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.grad)
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!("set `{name}`: {:?} vs {:?}", p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.len() != grad.len() {
            return Err(Error::shape(format!("gradient for `{name}` has {} values", grad.len())));
        }
        p.grad.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.value))
    }

    /// Parameter value, gradient and trainable flag, mutable, for optimizers.
    pub(crate) fn iter_mut_with_grad(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>, &[f64], bool)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p.value.data_mut(), p.grad.as_slice(), p.trainable))
    }

    /// Parameters whose name starts with `prefix`, with cleared gradients.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.clone(), Param { value: p.value.clone(), grad: vec![0.0; p.grad.len()], trainable: p.trainable }))
            .collect();
        ParamStore { params }
    }

    /// Copies every parameter of `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, p) in &other.params {
            if name.starts_with(prefix) {
                if self.params.contains_key(name) {
                    self.set_value(name, p.value.clone())?;
                } else {
                    self.insert(name.clone(), p.value.clone())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradient_shape_is_checked() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.accumulate("a", &[1.0; 3]).is_err());
        s.accumulate("a", &[1.0; 4]).unwrap();
        s.accumulate("a", &[1.0; 4]).unwrap();
        assert_eq!(s.grad("a").unwrap(), &[2.0; 4]);
        s.zero_grad();
        assert_eq!(s.grad("a").unwrap(), &[0.0; 4]);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert_glorot("w", 10, 20, &mut rng).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(s.value("w").unwrap().data().iter().all(|v| v.abs() <= limit));
    }
}
