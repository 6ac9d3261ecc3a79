use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `name`. Panics if the name was never bound; parameter
    /// names are fixed at construction so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Merges `other` into `self`, prefixing each name with `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Binds every tensor as a leaf. `trainable` decides per name whether
    /// the leaf tracks gradients.
    pub fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| true)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| false)
    }

    /// Collects gradients for bound names after [`Graph::backward`]. Leaves
    /// that did not influence the root get a zero gradient.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> Grads {
        bound
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| {
                let grad = g
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v).to_vec()));
                (k.clone(), grad)
            })
            .collect()
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(TensorError::Snapshot(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (k, t) in &self.tensors {
            match other.tensors.get(k) {
                None => return Err(TensorError::Snapshot(format!("missing tensor {k:?}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "load",
                        lhs: t.shape().to_vec(),
                        rhs: o.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
