use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, LeafGradients, Var};
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters, keyed by dotted path (`encoder.backbone.q.w`).
///
/// Ordered so that iteration, serialization, and optimizer updates are
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: BTreeMap<String, ParamEntry>,
}

/// Gradient per trainable parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

/// Graph handles for a [`ParameterSet`] bound onto one [`Graph`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `path`. Panics on unknown paths: model code only asks for
    /// parameters it registered itself, and loaded files are schema-checked.
    pub fn var(&self, path: &str) -> Var {
        match self.vars.get(path) {
            Some(v) => *v,
            None => panic!("parameter `{path}` is not bound"),
        }
    }

    pub fn try_var(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(contract(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(
            path,
            ParamEntry {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|e| &mut e.value)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(path)
            .ok_or_else(|| contract(format!("unknown parameter `{path}`")))?;
        e.trainable = trainable;
        Ok(())
    }

    /// Marks every parameter frozen or trainable.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.entries.get(path).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParameterSet) -> Result<()> {
        for (k, e) in other.entries {
            let path = format!("{prefix}.{k}");
            if self.entries.contains_key(&path) {
                return Err(contract(format!("duplicate parameter path `{path}`")));
            }
            self.entries.insert(path, e);
        }
        Ok(())
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParameterSet {
        let p = format!("{prefix}.");
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, e)| k.strip_prefix(&p).map(|s| (s.to_string(), e.clone())))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the paths and shapes of `reference`.
    pub fn check_schema(&self, reference: &ParameterSet) -> Result<()> {
        for (k, e) in &reference.entries {
            match self.entries.get(k) {
                None => return Err(Error::Schema(format!("missing parameter `{k}`"))),
                Some(mine) if mine.value.shape() != e.value.shape() => {
                    return Err(Error::Schema(format!(
                        "parameter `{k}` has shape {:?}, expected {:?}",
                        mine.value.shape(),
                        e.value.shape()
                    )))
                }
                Some(mine) if !mine.value.is_finite() => {
                    return Err(Error::Schema(format!("parameter `{k}` is not finite")))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.entries.keys().find(|k| !reference.entries.contains_key(*k)) {
            return Err(Error::Schema(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Places every parameter on `g`; trainable ones become differentiable
    /// leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let v = if e.trainable {
                    g.variable(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for trainable parameters from a finished backward pass.
    /// Parameters the loss did not touch get zero tensors.
    pub fn collect_gradients(&self, bound: &Bound, mut leaf: LeafGradients) -> Gradients {
        let mut grads = BTreeMap::new();
        for (k, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            let g = leaf
                .take(bound.var(k))
                .map(|t| Tensor::from_parts(e.value.shape().to_vec(), t.into_data()))
                .unwrap_or_else(|| Tensor::zeros(e.value.shape()));
            grads.insert(k.clone(), g);
        }
        Gradients { grads }
    }
}

impl Gradients {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.grads.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so that the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Elementwise `self + other`; both must cover the same paths.
    pub fn added(&self, other: &Gradients) -> Gradients {
        let mut grads = self.grads.clone();
        for (k, t) in grads.iter_mut() {
            if let Some(o) = other.grads.get(k) {
                t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
            }
        }
        Gradients { grads }
    }
}

/// Runs `program` on a fresh graph and returns the scalar loss together with
/// reverse-mode gradients for every trainable parameter.
pub fn evaluate_with_gradients<F>(params: &ParameterSet, program: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = program(&mut g, &bound)?;
    let leaf = g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((value, params.collect_gradients(&bound, leaf)))
}

/// Forward-only evaluation of a scalar program.
pub fn evaluate<F>(params: &ParameterSet, program: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = program(&mut g, &bound)?;
    g.check_finite()?;
    let (r, c) = g.shape(out);
    if (r, c) != (1, 1) {
        return Err(contract(format!("expected scalar output, got {r}×{c}")));
    }
    Ok(g.value(out).item())
}
