//! Named trainable tensors and their initializers.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamRng = ChaCha8Rng;

/// Insertion-ordered parameter table. Order is part of the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }
}

/// Xavier-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ParamRng) -> Tensor {
    let bound = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn normal(shape: Vec<usize>, std: f64, rng: &mut ParamRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Helper used by module builders: every registration goes through here so
/// naming and initialization stay in one place.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ParamRng,
}

impl Init<'_> {
    /// `[fan_in, fan_out]` weight plus zero bias, registered as `{name}.weight`/`{name}.bias`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = xavier_uniform(vec![fan_in, fan_out], fan_in, fan_out, self.rng);
        self.store.insert(format!("{name}.weight"), w)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))
    }

    /// Bias-free `[fan_in, fan_out]` weight registered under `name`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = xavier_uniform(vec![fan_in, fan_out], fan_in, fan_out, self.rng);
        self.store.insert(name.to_string(), w)
    }

    /// Cubic conv kernel `[k, k, k, cin, cout]` plus zero bias.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        let taps = k * k * k;
        let w = xavier_uniform(vec![k, k, k, cin, cout], taps * cin, taps * cout, self.rng);
        self.store.insert(format!("{name}.weight"), w)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.gamma"), Tensor::full(vec![c], 1.0))?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros(vec![c]))
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<()> {
        let t = normal(shape, std, self.rng);
        self.store.insert(name.to_string(), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bound_for_square_four() {
        assert!((xavier_bound(4, 4) - (6.0f64 / 8.0).sqrt()).abs() < 1e-15);
        assert!((xavier_bound(4, 4) - 0.866).abs() < 1e-3);
    }

    #[test]
    fn xavier_entries_within_bound() {
        let mut rng = ParamRng::seed_from_u64(7);
        let t = xavier_uniform(vec![4, 4], 4, 4, &mut rng);
        let b = xavier_bound(4, 4);
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn linear_count_is_weights_plus_bias() {
        let mut s = ParamStore::new();
        let mut rng = ParamRng::seed_from_u64(0);
        Init {
            store: &mut s,
            rng: &mut rng,
        }
        .linear("fc", 4, 3)
        .unwrap();
        assert_eq!(s.count(), 15);
    }
}
