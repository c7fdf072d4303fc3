//! Named parameter storage and gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NeuralError, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors. Insertion order is the
/// checkpoint manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is always a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor of `other` whose name and shape match a tensor
    /// here. Returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (_, name, src) in other.iter() {
            if let Some(id) = self.id_of(name) {
                if self.tensors[id.0].shape() == src.shape() {
                    self.tensors[id.0] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NeuralError> {
        if other.grads.len() != self.grads.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: vec![self.grads.len()],
                found: vec![other.grads.len()],
            });
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(NeuralError::ShapeMismatch {
                    expected: a.shape().to_vec(),
                    found: b.shape().to_vec(),
                });
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

