use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::numel;
use crate::Scalar;

/// Index of an entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Running statistics and similar buffers are stored but never optimized.
    pub trainable: bool,
}

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform with bound `sqrt(6 / fan_in)` (He initialization for ReLU nets).
    He { fan_in: usize },
}

/// Named, ordered collection of the learnable tensors of one or more networks.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        if data.len() != numel(shape) {
            return Err(crate::error::shape_err(
                "param",
                format!("`{name}`: shape {shape:?} with {} values", data.len()),
            ));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform(bound) => (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect(),
            Init::He { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect()
            }
        };
        self.insert(name, shape, data, true)
    }

    pub fn add_batchnorm(&mut self, prefix: &str, channels: usize) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.insert(&format!("{prefix}.gamma"), &[channels], vec![T::one(); channels], true)?,
            beta: self.insert(&format!("{prefix}.beta"), &[channels], vec![T::zero(); channels], true)?,
            running_mean: self.insert(&format!("{prefix}.running_mean"), &[channels], vec![T::zero(); channels], false)?,
            running_var: self.insert(&format!("{prefix}.running_var"), &[channels], vec![T::one(); channels], false)?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Copy of the store converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from `other` for every name present in both stores.
    /// Shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for e in &other.entries {
            if let Some(&i) = self.index.get(&e.name) {
                if self.entries[i].shape != e.shape {
                    return Err(crate::error::shape_err(
                        "copy_from",
                        format!("`{}`: {:?} vs {:?}", e.name, self.entries[i].shape, e.shape),
                    ));
                }
                self.entries[i].data.clone_from(&e.data);
                copied += 1;
            }
        }
        Ok(copied)
    }
}
