//! Named parameter registry (the model state θ) and its binding onto a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use migs_tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MigsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by optimisers.
    Trainable,
    /// Running statistics; updated by forward passes in training mode.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered map from parameter name to tensor.
///
/// Stored values are always exactly representable as `f32`, which is the
/// precision of the checkpoint format; arithmetic on them runs in `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState {
    entries: BTreeMap<String, Entry>,
}

pub(crate) fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor, kind: ParamKind) {
        round_f32(&mut value);
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Entry { value, kind });
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    /// Normal(0, std²) initialised trainable tensor.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.insert(name, t, ParamKind::Trainable);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape), ParamKind::Trainable);
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64, kind: ParamKind) {
        self.insert(name, Tensor::full(shape, value), kind);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Replace an existing tensor (shape must match).
    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| MigsError::Contract(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(MigsError::Contract(format!(
                "{name}: shape {:?} != {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        round_f32(&mut value);
        e.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn same_names(&self, other: &ModelState) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ea), (b, eb))| {
                    a == b && ea.value.shape() == eb.value.shape() && ea.kind == eb.kind
                })
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.is_finite())
    }

    /// Bind onto `tape`. Entries for which `track(name)` is true become
    /// gradient-tracked leaves, the rest constants.
    pub fn bind<'a>(
        &'a self,
        tape: &'a Tape,
        training: bool,
        track: impl Fn(&str) -> bool + 'a,
    ) -> Bound<'a> {
        Bound {
            state: self,
            tape,
            training,
            track: Box::new(track),
            vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Bind with some entries replaced by existing tape variables; every
    /// other entry is a constant. Used to differentiate w.r.t. chosen
    /// parameters.
    pub fn bind_with<'a>(
        &'a self,
        tape: &'a Tape,
        training: bool,
        overrides: HashMap<String, Var>,
    ) -> Bound<'a> {
        Bound {
            state: self,
            tape,
            training,
            track: Box::new(|_| false),
            vars: RefCell::new(overrides),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            self.set(&name, value)?;
        }
        Ok(())
    }
}

/// A [`ModelState`] viewed through one tape for one forward pass.
pub struct Bound<'a> {
    state: &'a ModelState,
    tape: &'a Tape,
    training: bool,
    track: Box<dyn Fn(&str) -> bool + 'a>,
    vars: RefCell<HashMap<String, Var>>,
    buffer_updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'a> Bound<'a> {
    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn state(&self) -> &'a ModelState {
        self.state
    }

    /// Tape variable for `name`, created on first use.
    pub fn get(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let entry = self
            .state
            .entry(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if entry.kind == ParamKind::Trainable && (self.track)(name) {
            self.tape.var(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn record_buffer(&self, name: String, value: Tensor) {
        self.buffer_updates.borrow_mut().push((name, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradients of every tracked parameter touched by the forward pass.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in self.vars.borrow().iter() {
            if !self.tape.requires_grad(v) {
                continue;
            }
            if let Some(g) = grads.get(v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
