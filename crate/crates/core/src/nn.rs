//! Parameter storage and affine layers.
//!
//! All trainable tensors live in one [`ParamStore`]; layers hold
//! [`ParamId`]s into it. A [`Binder`] places parameters on a graph on first
//! use, either as gradient leaves (training) or constants (inference).

use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        ensure!(
            value.shape() == self.tensors[id.0].shape(),
            "parameter {} expects shape {:?}, got {:?}",
            self.names[id.0],
            self.tensors[id.0].shape(),
            value.shape()
        );
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Lazily binds store parameters onto a graph.
pub struct Binder<'a, S> {
    store: &'a ParamStore<S>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, S: Scalar> Binder<'a, S> {
    pub fn trainable(store: &'a ParamStore<S>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn var(&mut self, g: &mut Graph<S>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// `(id, var)` for every parameter that was used.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    /// Uniform `[-1/sqrt(in), 1/sqrt(in)]` initialization for weight and bias.
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<S> {
            (0..n).map(|_| S::cast(rng.random_range(-bound..=bound))).collect()
        };
        let w = Tensor::new(vec![in_dim, out_dim], draw(in_dim * out_dim)).expect("sized");
        let b = Tensor::vector(draw(out_dim));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, p: &mut Binder<'_, S>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.affine(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}
