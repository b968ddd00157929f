//! Named parameter collections and their binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy with every name prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries named `prefix.*`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{prefix}.");
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Replace values by name; shapes must agree and every name must exist.
    pub fn assign_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, value) in &mut self.tensors {
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// Record every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Record every parameter as a constant (inference, or frozen weights).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Pair names with already recorded variables.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: impl IntoIterator<Item = Var>) -> Self {
        Bound {
            vars: names.into_iter().zip(vars).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("no parameter named {name:?}")))
    }

    /// Gradient of each bound parameter that the loss reached.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// He-normal initialization: N(0, 2/fan_in).
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(normal.sample(rng)))
}

/// Weight and zero bias of an `out`×`inp`×`k`×`k` convolution.
pub fn conv_layer<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    inp: usize,
    out: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(format!("{name}.weight"), he_normal(&[out, inp, k, k], inp * k * k, rng))?;
    params.insert(format!("{name}.bias"), Tensor::zeros([out]))
}

/// Weight and zero bias of an `out`×`inp` fully connected layer.
pub fn linear_layer<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(format!("{name}.weight"), he_normal(&[out, inp], inp, rng))?;
    params.insert(format!("{name}.bias"), Tensor::zeros([out]))
}

/// `conv(x)` with "same" zero padding using `name.weight` / `name.bias`.
pub(crate) fn conv<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.weight"))?;
    let b = bound.var(&format!("{name}.bias"))?;
    tape.conv2d_same(x, w, b)
}

pub(crate) fn conv_relu<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, bound, name, x)?;
    Ok(tape.relu(y))
}

pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.weight"))?;
    let b = bound.var(&format!("{name}.bias"))?;
    tape.linear(x, w, b)
}
