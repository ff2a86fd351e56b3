//! Named parameter storage and per-pass binding onto a [`Tape`].

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    residual_head: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn is_residual_head(&self, id: ParamId) -> bool {
        self.entries[id.0].residual_head
    }

    /// Zeroes every parameter of a residual branch's final projection, which
    /// turns each residual block (and the whole network) into the identity.
    pub fn zero_residual_heads(&mut self) {
        for e in self.entries.iter_mut().filter(|e| e.residual_head) {
            e.value.data_mut().fill(T::zero());
        }
    }

    /// Replaces every value with the one of the same name in `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in self.entries.iter_mut() {
            let src = other
                .find(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor<T>, residual_head: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            residual_head,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    residual_head: e.residual_head,
                })
                .collect(),
        }
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect(),
        }
    }
}

/// Parameters registered on one tape for a single forward/backward pass.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }

    /// Gradient of every parameter in store order; missing ones are zero.
    pub fn gradients(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.full_name(name.as_ref()),
            store: self.store,
            rng: self.rng,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), T::one()),
            Init::Const(v) => Tensor::full(shape.to_vec(), T::lit(v)),
            Init::Uniform(bound) => {
                let rng = &mut *self.rng;
                Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..=bound)))
            }
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = self.make(shape, init);
        self.store.push(self.full_name(name), value, false)
    }

    /// Like [`ParamBuilder::add`], flagged as the last projection of a
    /// residual branch (see [`ParamStore::zero_residual_heads`]).
    pub fn add_head(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = self.make(shape, init);
        self.store.push(self.full_name(name), value, true)
    }
}
