//! Named parameter tree with a trainable mask.

use std::collections::BTreeMap;

use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(arg_err!("duplicate parameter name `{name}`"));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.ids().filter(|&id| self.is_trainable(id)).map(|id| self.get(id).numel()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `src`,
    /// requiring identical shapes. Returns the number of tensors copied.
    pub fn load_prefix(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut mismatches = Vec::new();
        let mut copied = 0;
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.names[id.0].clone();
            if !name.starts_with(prefix) {
                continue;
            }
            match src.id(&name) {
                None => mismatches.push(format!("{name}: missing in source")),
                Some(sid) if src.get(sid).shape() != self.get(id).shape() => mismatches.push(format!(
                    "{name}: source {:?} vs model {:?}",
                    src.get(sid).shape(),
                    self.get(id).shape()
                )),
                Some(sid) => {
                    self.values[id.0] = src.get(sid).clone();
                    copied += 1;
                }
            }
        }
        if mismatches.is_empty() {
            Ok(copied)
        } else {
            Err(Error::Incompatible(mismatches.join("; ")))
        }
    }
}

/// Initialisation rule of a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Name, shape and initialiser of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialise<T: Scalar, R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, T::one()),
            Init::Normal(std) => Tensor::randn(&self.shape, std, rng),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Adds every spec in order, drawing initial values from `rng`.
    pub fn add_all<R: rand::Rng + ?Sized>(&mut self, specs: &[ParamSpec], rng: &mut R) -> Result<Vec<ParamId>> {
        specs.iter().map(|s| self.add(s.name.clone(), s.materialise(rng))).collect()
    }

    /// Looks up a parameter that must exist.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| arg_err!("parameter `{name}` not found"))
    }
}
