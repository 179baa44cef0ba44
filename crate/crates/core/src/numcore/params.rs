use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Values are reference counted so that a forward
/// graph can hold them without copying; the optimizer writes through
/// copy-on-write, which makes cloning a store a cheap snapshot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    /// Inserts a parameter drawn from Normal(0, std).
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn get_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces a value, requiring the shape to stay the same.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", cur.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`]; `None` means the
/// parameter was not reached.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        ParamGrads {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Adds another gradient set elementwise.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Drops gradients for which `keep` returns false.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
