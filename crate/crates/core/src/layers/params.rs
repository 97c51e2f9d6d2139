use indexmap::IndexMap;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), tape.param(v.clone())?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Registers every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BoundParams> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), tape.constant(v.clone())?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams { vars })
    }

    /// Pulls gradients for every bound parameter after `tape.backward`.
    /// Parameters the loss does not reach get zero gradients.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|(name, value)| {
                bound
                    .vars
                    .get(name)
                    .and_then(|&v| tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }

    pub(crate) fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit) as Scalar);
        self.insert(name, t);
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds explicit variables, e.g. ones created by a gradient checker.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }
}
