//! Named parameter tables and their binding onto a tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to. Only the encoder can
/// be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered, named parameter table. Insertion order is the canonical order
/// used by checkpoints and optimizers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    /// Replaces the value of `name`, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Places every parameter on `tape`; groups for which `trainable`
    /// returns false become constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), trainable(e.group)))
                .collect(),
        }
    }

    /// Binding for inference: nothing is tracked.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }
}

/// Parameters placed on one tape, addressable by [`ParamId`].
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps vars that were placed on a tape elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Per-parameter gradient buffers in store order; `None` for parameters
    /// that were frozen or did not influence the loss.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|&v| grads.get(v).map(<[T]>::to_vec)).collect()
    }
}

/// Uniform initializer in `[-bound, bound]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

/// Glorot-style bound for a layer with the given fan-in and fan-out.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64)
}
