use std::collections::BTreeMap;

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Named parameter arrays. Ordered by name so that iteration, and
/// everything derived from it (checkpoints, gradient sums), is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Same names with the same shapes.
    pub fn same_structure<G: Scalar>(&self, other: &ParamStore<G>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Add every tensor to `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph<F>) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Euclidean distance between two structurally identical stores.
    pub fn distance(&self, other: &ParamStore<F>) -> Result<f64> {
        if !self.same_structure(other) {
            return Err(Error::contract("parameter stores differ in structure"));
        }
        let mut acc = 0.0;
        for (a, b) in self.tensors.values().zip(other.tensors.values()) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                let d = (x - y).to_f64();
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Graph handles of a registered [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after `backward`; parameters nothing flowed into get zeros.
    pub fn collect_grads<F: Scalar>(&self, g: &Graph<F>) -> Grads<F> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let shape = g.shape(v).to_vec();
                let t = match g.grad(v) {
                    Some(gr) => Tensor::from_parts_unchecked(shape, gr.to_vec()),
                    None => Tensor::zeros(shape),
                };
                (k.clone(), t)
            })
            .collect();
        Grads { tensors }
    }
}

/// Gradient arrays keyed like the [`ParamStore`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        Grads {
            tensors: params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Reinterpret a parameter-shaped store as gradients.
    pub fn from_store(store: &ParamStore<F>) -> Self {
        Grads {
            tensors: store.tensors.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn add_assign(&mut self, other: &Grads<F>) -> Result<()> {
        for (k, t) in self.tensors.iter_mut() {
            let o = other
                .tensors
                .get(k)
                .ok_or_else(|| Error::contract(format!("gradient `{k}` missing")))?;
            for (a, &b) in t.values_mut().iter_mut().zip(o.values()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: F) {
        for t in self.tensors.values_mut() {
            for a in t.values_mut() {
                *a *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.values().iter().all(|v| v.is_finite()))
    }
}
