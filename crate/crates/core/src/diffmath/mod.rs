//! Minimal numeric substrate: dense tensors, a reverse-mode tape and
//! named parameter sets.

mod graph;
mod tensor;

pub mod fd;

use std::collections::BTreeMap;

pub use graph::{sigmoid, softplus, BackwardFn, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Named tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

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

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Sub-set of entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Errors unless both sets have identical names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Invalid(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::Invalid(format!("parameter name {ka} vs {kb}")));
            }
            va.check_same(vb, "param set")?;
        }
        Ok(())
    }

    /// Binds every tensor into `g`, as trainable parameters or constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        g.param(k, v.clone())
                    } else {
                        g.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl From<BTreeMap<String, Tensor>> for ParamSet {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Parameter set bound into a [`Graph`].
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Panics on a missing name: networks look up names they created.
    pub fn var(&self, name: &str) -> Var<'g> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }
}

/// Evaluates `loss` on `params` and returns the value together with the
/// gradient of every parameter.
pub fn grad<F>(params: &ParamSet, loss: F) -> Result<(f64, ParamSet)>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let l = loss(&g, &bound)?;
    let grads = g.backward(l)?;
    Ok((l.item(), ParamSet::from(grads.params())))
}

/// Evaluates `loss` without recording gradients.
pub fn value<F>(params: &ParamSet, loss: F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let l = loss(&g, &bound)?;
    Ok(l.item())
}

/// Pins a closure to the higher-ranked signature that [`grad`] and
/// [`value`] expect; plain closures do not infer it.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    f
}
