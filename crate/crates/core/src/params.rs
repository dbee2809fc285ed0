//! Named parameter tables and their binding onto a gradient tape.

use std::collections::BTreeMap;

use cife_tensor::{NoiseRng, Scalar, Tape, Tensor, Var};

use crate::error::{CifeError, Result};

/// Dotted-name parameter table. Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.entries.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Bitwise comparison, including the name set.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape handles for a set of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every entry of `store` as a leaf on `tape`.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, value) in store.iter() {
            let var = tape.leaf(value.cast(), trainable)?;
            vars.insert(name.clone(), var);
        }
        Ok(Bound { vars })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CifeError::MissingParam(name.to_string()))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Seeded parameter initializer.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: NoiseRng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, label: &str) -> Self {
        Init {
            store,
            rng: NoiseRng::new(seed, label),
        }
    }

    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) {
        let t = self.rng.normal_tensor::<f32>(shape).map(|v| v * std as f32);
        self.store.insert(name, t);
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        self.normal(format!("{name}.weight"), vec![cout, cin, k, k], 1.0 / fan_in.sqrt());
        self.store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
    }

    pub fn zero_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        self.store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
    }

    pub fn linear(&mut self, name: &str, dout: usize, din: usize) {
        self.normal(format!("{name}.weight"), vec![dout, din], 1.0 / (din as f64).sqrt());
        self.store.insert(format!("{name}.bias"), Tensor::zeros([dout]));
    }

    pub fn zero_linear(&mut self, name: &str, dout: usize, din: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::zeros([dout, din]));
        self.store.insert(format!("{name}.bias"), Tensor::zeros([dout]));
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::ones([c]));
        self.store.insert(format!("{name}.beta"), Tensor::zeros([c]));
    }

    pub fn table(&mut self, name: &str, shape: Vec<usize>, std: f64) {
        self.normal(name.to_string(), shape, std);
    }
}
