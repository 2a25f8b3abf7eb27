//! Named parameter tensors and their gradient accumulators.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Result, SpenError};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered map from parameter name to value plus a same-shaped gradient
/// accumulator. Iteration order is lexicographic, which keeps training
/// runs deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros_like(&value);
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| SpenError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| SpenError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| SpenError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Add `grads` into the accumulators. Unknown names and shape mismatches
    /// are errors.
    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| SpenError::Config(format!("unknown parameter `{name}`")))?;
            p.grad.check_same_shape(g, "accumulate")?;
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Accumulated gradients as a map (zero entries included).
    pub fn grads(&self) -> ParamGrads {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.grad.clone()))
            .collect()
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values from a named map; every name must already exist with
    /// the same shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, v) in values {
            let p = self.get_mut(name)?;
            p.check_same_shape(v, "load_values")?;
            *p = v.clone();
        }
        Ok(())
    }

    /// Ensure every name in `names` exists.
    pub fn check_names<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for n in names {
            if !self.contains(n) {
                return Err(SpenError::Config(format!("unknown parameter `{n}`")));
            }
        }
        Ok(())
    }
}

/// Sum `b` into `a`, inserting missing names.
pub fn add_grads(a: &mut ParamGrads, b: &ParamGrads) {
    for (k, v) in b {
        match a.get_mut(k) {
            Some(acc) => acc.add_assign(v),
            None => {
                a.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn scale_grads(a: &mut ParamGrads, s: f64) {
    for v in a.values_mut() {
        *v = v.scale(s);
    }
}

/// A tape plus lazily bound parameter leaves.
///
/// Energies look parameters up by name through [`Graph::param`]; each name
/// becomes one leaf no matter how often it is used, so gradients from
/// repeated uses accumulate on that leaf.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    param_grads: bool,
}

impl<'p> Graph<'p> {
    /// `param_grads` selects whether parameter leaves require gradients.
    pub fn new(params: &'p ParamSet, param_grads: bool) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            param_grads,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.leaf(value, self.param_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Collect gradients for every bound parameter.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
