use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model parameters. Names are unique and iteration is in name order,
/// which keeps every consumer (optimizer, checkpoint writer) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    /// Replace the value of an existing parameter; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamSet::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Register every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundParams<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'g>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of `output` with respect to every bound parameter, evaluated.
    pub fn gradients(&self, output: Var<'g>) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&String> = self.vars.keys().collect();
        let wrt: Vec<Var<'g>> = self.vars.values().copied().collect();
        let grads = output.graph().grad(output, &wrt)?;
        Ok(names
            .into_iter()
            .zip(grads)
            .map(|(name, g)| (name.clone(), (*g.value()).clone()))
            .collect())
    }
}
