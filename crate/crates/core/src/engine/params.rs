use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{EngineError, Tensor};

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters keep their gradient accumulator but are skipped by
    /// the optimizer.
    pub trainable: bool,
}

/// Named, ordered collection of trainable tensors. Insertion order is the
/// canonical order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, EngineError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(EngineError::Contract(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            trainable: true,
        });
        Ok(id)
    }

    /// Adds a parameter drawn from `Normal(0, std)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, EngineError> {
        let dist = Normal::new(0.0, std)
            .map_err(|e| EngineError::Contract(format!("init std {std}: {e}")))?;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(rng))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
    ) -> Result<ParamId, EngineError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
    ) -> Result<ParamId, EngineError> {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<(), EngineError> {
        for (id, g) in &grads.entries {
            self.params[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Gradients for the parameters a tape touched, in binding order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2])).unwrap();
        let b = store.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(store.id("b"), Some(b));
        assert_eq!(store.ids().collect::<Vec<_>>(), vec![a, b]);
        assert!(store.get(a).requires_grad());
        assert_eq!(store.num_scalars(), 5);
    }
}
