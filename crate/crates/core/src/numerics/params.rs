use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Rng, Tensor};
use crate::error::{ensure, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.tensors.push(tensor.with_requires_grad(true));
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix `[fan_in × fan_out]` drawn from N(0, 1/fan_in).
    pub fn linear(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let scale = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("positive dims"))
    }

    /// Tensor of the given shape drawn from N(0, std²).
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("positive dims"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        ensure!(
            tensor.shape() == self.tensors[id.0].shape(),
            Shape,
            "parameter {} expects {:?}, got {:?}",
            self.names[id.0],
            self.tensors[id.0].shape(),
            tensor.shape()
        );
        self.tensors[id.0] = tensor.with_requires_grad(true);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Exact equality of every stored value, compared by bit pattern.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradient buffers keyed by [`ParamId`]; `None` means the parameter was not reached.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        ParamGrads { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Parameters that received a gradient.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| ParamId(i))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
