use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    /// Adds a parameter drawn from U(−1/√fan_in, +1/√fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every parameter value from `(name, tensor)` pairs; names and
    /// shapes must match the store exactly.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint holds {} tensors but the model has {}",
                values.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter `{name}` in checkpoint")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
