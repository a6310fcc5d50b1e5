use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent and counted as a model parameter.
    Learnable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered tensors of a model. Names are hierarchical dotted paths and
/// unique; insertion order is the canonical order used by checkpoints and the
/// optimizer.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<T: Float> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Uniform(bound) => {
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            grad: Tensor::zeros(shape),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn learnable(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.add(name, shape, init, ParamKind::Learnable)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.add(name, shape, init, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn count_learnable_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Sets every learnable tensor whose name satisfies `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.kind == ParamKind::Learnable && pred(&e.name) {
                e.value.fill(T::zero());
                n += 1;
            }
        }
        n
    }

    /// Replaces all values at once, validating names and shapes first so a
    /// failure leaves the store untouched.
    pub fn replace_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut missing: Vec<&str> = Vec::new();
        let mut extra = Vec::new();
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; self.entries.len()];
        for (name, t) in values {
            match self.by_name.get(&name) {
                Some(&id) => {
                    let want = self.entries[id.0].value.shape();
                    if t.shape() != want {
                        return Err(Error::Incompatible(format!(
                            "`{name}` has shape {:?}, model expects {want:?}",
                            t.shape()
                        )));
                    }
                    slots[id.0] = Some(t);
                }
                None => extra.push(name),
            }
        }
        for (e, s) in self.entries.iter().zip(&slots) {
            if s.is_none() {
                missing.push(&e.name);
            }
        }
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Incompatible(format!(
                "parameter sets differ; missing: [{}]; extra: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(slots) {
            e.value = s.expect("checked above");
        }
        Ok(())
    }
}
