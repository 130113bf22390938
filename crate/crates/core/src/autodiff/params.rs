//! Named parameter storage and the linear/normalization building blocks.

use std::collections::HashMap;

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; `trainable` decides gradient participation.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.leaf(v.clone(), trainable(ParamId(i))))
            .collect();
        Bound { vars }
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight `[in, out]` and bias `[out]` values for a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A dense layer whose weight and bias are all exactly zero.
pub fn linear_zero_init(in_dim: usize, out_dim: usize) -> LinearBlock {
    LinearBlock {
        weight: Tensor::zeros(vec![in_dim, out_dim]),
        bias: Tensor::zeros(vec![out_dim]),
    }
}

/// Uniform `±sqrt(1/in)` weights, zero bias.
pub fn linear_uniform_init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> LinearBlock {
    let bound = (1.0 / in_dim as f64).sqrt();
    let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    LinearBlock {
        weight: Tensor::new(vec![in_dim, out_dim], w).expect("sized"),
        bias: Tensor::zeros(vec![out_dim]),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, block: LinearBlock) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), block.weight),
            bias: store.add(format!("{name}.bias"), block.bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(h, p.var(self.bias))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.mul_row(n, p.var(self.gain))?;
        tape.add_bias(g, p.var(self.shift))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}
