//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Declaration of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Excluded from decoupled weight decay.
    pub decay_exempt: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
            decay_exempt: !matches!(init, Init::Normal(_)),
        }
    }

    pub fn exempt(mut self, exempt: bool) -> Self {
        self.decay_exempt = exempt;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay_exempt: bool,
}

/// Learnable tensors in declaration order, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    /// Materialises `specs` in order, drawing random initial values from `rng`.
    pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::default();
        for spec in specs {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::ones(spec.shape.clone()),
                Init::Normal(std) => Tensor::randn(spec.shape.clone(), std, rng),
            };
            store.insert(spec.name.clone(), tensor, spec.decay_exempt)?;
        }
        Ok(store)
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        decay_exempt: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            decay_exempt,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay_exempt: e.decay_exempt,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor on `tape` as a named parameter.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), tape.param(e.name.clone(), e.tensor.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("missing parameter {name}")))
    }
}
