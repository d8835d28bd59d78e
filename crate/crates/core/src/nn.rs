//! Named parameters and the transformer building blocks shared by the
//! localization network and the classifier.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Ordered name → tensor map. Iteration order is the sorted name order, which
/// keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, value) in other.iter() {
            if name.starts_with(prefix) && self.params.contains_key(name) {
                self.params.insert(name.clone(), value.clone());
                n += 1;
            }
        }
        n
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    vars: HashMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Registers every parameter; those for which `trainable` is true become
    /// gradient-carrying leaves, the rest constants.
    pub fn bind(tape: &'t Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient for every trainable parameter, keyed by name.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Wraps existing vars under the given names, e.g. to gradient-check a
/// network with respect to its weights.
pub fn bind_vars<'t>(names: &[String], vars: &[Var<'t>]) -> Bound<'t> {
    Bound {
        vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

pub fn init_block(store: &mut ParamStore, prefix: &str, shape: BlockShape, rng: &mut impl Rng) {
    let d = shape.dim;
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, &format!("{prefix}.attn.qkv"), d, 3 * d, rng);
    init_linear(store, &format!("{prefix}.attn.out"), d, d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, shape.mlp_hidden, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), shape.mlp_hidden, d, rng);
}

/// `x·W + b` for `x` of shape `[N, in]` or `[in]`.
pub fn linear<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    if x.value().rank() == 1 {
        let n = x.value().numel();
        let y = x.reshape(&[1, n])?.matmul(w)?.add(b)?;
        let out = y.value().numel();
        return y.reshape(&[out]);
    }
    x.matmul(w)?.add(b)
}

pub fn layer_norm<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    x.layer_norm(LN_EPS).mul(g)?.add(b)
}

/// Multi-head self-attention over the rows of `x: [N, C]`.
pub fn self_attention<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let c = x.shape()[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels not divisible into {heads} heads")));
    }
    let d = c / heads;
    let qkv = linear(p, &format!("{prefix}.qkv"), x)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.narrow(1, h * d, d)?;
        let k = qkv.narrow(1, c + h * d, d)?;
        let v = qkv.narrow(1, 2 * c + h * d, d)?;
        let attn = q.matmul(k.transpose()?)?.scale(scale).softmax();
        outs.push(attn.matmul(v)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
    linear(p, &format!("{prefix}.out"), merged)
}

/// Pre-norm transformer encoder block. `dropout_mask`, when given, multiplies
/// the block output.
pub fn encoder_block<'t>(
    p: &Bound<'t>,
    prefix: &str,
    x: Var<'t>,
    heads: usize,
    dropout_mask: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let h = layer_norm(p, &format!("{prefix}.ln1"), x)?;
    let x = x.add(self_attention(p, &format!("{prefix}.attn"), h, heads)?)?;
    let h = layer_norm(p, &format!("{prefix}.ln2"), x)?;
    let h = linear(p, &format!("{prefix}.mlp.fc1"), h)?.gelu();
    let x = x.add(linear(p, &format!("{prefix}.mlp.fc2"), h)?)?;
    match dropout_mask {
        Some(m) => x.mul(m),
        None => Ok(x),
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(rng: &mut impl Rng, shape: &[usize], rate: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_parts(
        shape.to_vec(),
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}
