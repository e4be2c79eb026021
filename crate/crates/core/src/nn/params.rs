use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a parameter. Buffers are persisted but never
/// updated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Named, ordered collection of every weight and buffer of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, tensor, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalars the optimizer updates.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group != ParamGroup::Buffer)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Replaces every tensor by the equally named one in `tensors`.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape != e.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    e.name, t.shape, e.tensor.shape
                )));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    /// Sets every trainable tensor to zero (buffers untouched).
    pub fn zero_trainable(&mut self) {
        for e in &mut self.entries {
            if e.group != ParamGroup::Buffer {
                e.tensor.data.fill(0.0);
            }
        }
    }
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Random unit vector.
pub fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
