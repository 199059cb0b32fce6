use indexmap::IndexMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Named trainable tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    entries: IndexMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`, as tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| {
                let var = if trainable {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Names existing tape variables after these parameters, in order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundParams<'t>> {
        if vars.len() != self.entries.len() {
            return shape_err(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.entries.len()
            ));
        }
        for ((name, p), v) in self.entries.iter().zip(vars) {
            if p.shape() != v.shape() {
                return shape_err(format!("{name}: variable {:?} vs {:?}", v.shape(), p.shape()));
            }
        }
        let vars = self.entries.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(BoundParams { vars })
    }

    /// Copies of the values, in order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.values().cloned().collect()
    }
}

/// Parameters registered on one tape.
#[derive(Debug)]
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Gradients in parameter order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.values().map(|&v| grads.get(v)).collect()
    }
}

pub(crate) fn check_same_shapes(params: &Parameters, others: &[Tensor], what: &str) -> Result<()> {
    if params.len() != others.len() {
        return shape_err(format!("{} parameters but {} {what}", params.len(), others.len()));
    }
    for ((name, p), o) in params.iter().zip(others) {
        if p.shape() != o.shape() {
            return shape_err(format!(
                "{what} for {name} has shape {:?}, parameter is {:?}",
                o.shape(),
                p.shape()
            ));
        }
    }
    Ok(())
}
