use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer and freezing groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    TextEncoder,
    VisionEncoder,
    Head,
    Temperature,
    /// Objective-specific parameters that are not part of a checkpoint.
    Aux,
}

impl ParamGroup {
    pub fn is_encoder(self) -> bool {
        matches!(self, ParamGroup::TextEncoder | ParamGroup::VisionEncoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Named parameters in registration order. Layer structs hold [`ParamId`]s
/// into a store rather than tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("param shape"))
    }

    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut SplitMix64,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("param shape"))
    }

    pub fn filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(
            name,
            group,
            Tensor::new(shape.to_vec(), vec![T::lit(value); n]).expect("param shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Overwrites every parameter whose name starts with `prefix` by the
    /// same-named tensor in `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let src = other
                .find(&e.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Format(format!("parameter `{}` missing", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = src.clone();
        }
        Ok(())
    }

    /// Records every parameter on the tape; only groups accepted by
    /// `trainable` receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| tape.param(&e.tensor, trainable(e.group)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Adam over a whole store with one learning rate per group.
#[derive(Clone, Debug)]
pub struct GroupAdam<T> {
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> GroupAdam<T> {
    pub fn new(store: &ParamStore<T>, lr: impl Fn(ParamGroup) -> f64) -> Self {
        Self {
            states: store
                .entries
                .iter()
                .map(|e| AdamState::new(e.tensor.numel(), AdamConfig::with_lr(lr(e.group))))
                .collect(),
        }
    }

    /// Applies an update to every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (i, (e, st)) in store.entries.iter_mut().zip(&mut self.states).enumerate() {
            if let Some(g) = grads.get(bound.vars[i]) {
                adam_step(e.tensor.data_mut(), g, st)?;
            }
        }
        Ok(())
    }
}
