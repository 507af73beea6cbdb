use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Named model parameters, ordered by name, with the subset shared between
/// tasks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    shared: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_shared(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.shared.insert(name.clone());
        self.params.insert(name, value);
    }

    pub fn mark_shared(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(Error::UnknownParameter(name.to_string()));
        }
        self.shared.insert(name.to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn shared(&self) -> &BTreeSet<String> {
        &self.shared
    }

    pub fn is_shared(&self, name: &str) -> bool {
        self.shared.contains(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Number of scalar values in the shared subset.
    pub fn shared_numel(&self) -> usize {
        self.shared.iter().map(|n| self.params[n].len()).sum()
    }

    /// All values in name order, each tensor row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "unflatten",
                format!("expected {} values, got {}", self.numel(), flat.len()),
            ));
        }
        let mut off = 0;
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            let n = t.len();
            params.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
            );
            off += n;
        }
        Ok(ParamSet {
            params,
            shared: self.shared.clone(),
        })
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-parameter gradients, ordered by name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Gradient of scalar `root` for every bound parameter. Parameters the root
/// does not depend on get zeros.
pub fn backward(root: Var<'_>, params: &BoundParams<'_>) -> Result<GradMap> {
    let grads: Gradients = root.tape().backward(root)?;
    Ok(params
        .iter()
        .map(|(name, var)| (name.to_string(), grads.get(var)))
        .collect())
}

/// Concatenate the gradients of the `shared` names, in name order.
pub fn flatten_grads(grads: &GradMap, shared: &BTreeSet<String>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for name in shared {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        out.extend_from_slice(g.data());
    }
    Ok(out)
}

/// Split a flat shared-gradient vector back into per-parameter tensors, using
/// the shapes in `layout`.
pub fn unflatten_grads(flat: &[f64], layout: &ParamSet) -> Result<GradMap> {
    let mut out = GradMap::new();
    let mut off = 0;
    for name in layout.shared() {
        let t = layout
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let n = t.len();
        if off + n > flat.len() {
            return Err(Error::shape("unflatten_grads", format!("vector too short at `{name}`")));
        }
        out.insert(
            name.clone(),
            Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
        );
        off += n;
    }
    if off != flat.len() {
        return Err(Error::shape(
            "unflatten_grads",
            format!("expected {off} values, got {}", flat.len()),
        ));
    }
    Ok(out)
}
