//! Named parameter registry shared by the model, the optimizer and the
//! checkpoint code.

use std::collections::HashMap;

use pyrad_tensor::{Element, Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution or dense weight matrix (orthogonally initialized).
    Weight,
    /// Additive offsets: biases and batch-norm beta.
    Bias,
    /// Batch-norm gamma.
    Scale,
    /// Non-differentiable state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T: Element> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
    role: ParamRole,
}

/// Ordered collection of named tensors.
///
/// Each store has a namespace so two stores can bind parameters into the
/// same [`Graph`] without key collisions.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    namespace: u32,
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new(namespace: u32) -> Self {
        Self {
            namespace,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool, role: ParamRole) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Config("parameter names must be non-empty".into()));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let trainable = trainable && role != ParamRole::Buffer;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            trainable,
            role,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Graph key for a parameter of this store.
    pub fn key(&self, id: ParamId) -> usize {
        ((self.namespace as usize) << 32) | id.0
    }

    /// Inverse of [`ParamStore::key`] for keys owned by this store.
    pub fn id_for_key(&self, key: usize) -> Option<ParamId> {
        ((key >> 32) as u32 == self.namespace && (key & 0xFFFF_FFFF) < self.entries.len())
            .then_some(ParamId(key & 0xFFFF_FFFF))
    }

    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.key(id), self.get(id), self.is_trainable(id))
    }

    /// Replace a trainable parameter's value. Frozen parameters refuse.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &self.entries[id.0];
        if !e.trainable {
            return Err(Error::Frozen(e.name.clone()));
        }
        self.replace(id, value)
    }

    /// Mutable access to a trainable parameter's values.
    pub fn data_mut(&mut self, id: ParamId) -> Result<&mut [T]> {
        let e = &mut self.entries[id.0];
        if !e.trainable {
            return Err(Error::Frozen(e.name.clone()));
        }
        Ok(e.value.data_mut())
    }

    pub(crate) fn set_buffer(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if self.entries[id.0].role != ParamRole::Buffer {
            return Err(Error::Frozen(self.entries[id.0].name.clone()));
        }
        self.replace(id, value)
    }

    /// Unconditional replacement used while building or restoring.
    pub(crate) fn replace(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Load(format!(
                "{}: expected shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Load values by name. Every parameter named `prefix + n` must be
    /// provided as `n` (or as `prefix + n`) with a matching shape; extra
    /// names are ignored. All problems are reported together.
    pub(crate) fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut updates = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let Some(short) = e.name.strip_prefix(prefix) else { continue };
            let Some(t) = by_name.get(short).or_else(|| by_name.get(e.name.as_str())) else {
                missing.push(e.name.clone());
                continue;
            };
            if t.shape() != e.value.shape() {
                mismatched.push(format!("{} (expected {:?}, got {:?})", e.name, e.value.shape(), t.shape()));
                continue;
            }
            updates.push((i, t.cast::<T>()));
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            let mut parts = Vec::new();
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatch: {}", mismatched.join(", ")));
            }
            if !missing.is_empty() {
                parts.push(format!("missing: {}", missing.join(", ")));
            }
            return Err(Error::Load(parts.join("; ")));
        }
        for (i, t) in updates {
            self.entries[i].value = t;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            namespace: self.namespace,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                    role: e.role,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
