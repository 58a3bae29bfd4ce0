//! Named trainable parameters, non-trainable buffers, and the per-forward
//! [`Session`] that binds them to a tape.
//!
//! Model structs only hold [`ParamId`]s, so the same module tree can run
//! against an `f32` store for training and an `f64` store for gradient
//! checks.

use std::collections::HashSet;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Skipped by decoupled weight decay (biases, norm affines, SSM
    /// dynamics).
    pub decay_exempt: bool,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Every parameter and buffer of one model instance, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashSet::new(),
        }
    }

    fn claim(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_string()),
            "duplicate parameter name `{name}`"
        );
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay_exempt: bool) -> ParamId {
        let name = name.into();
        self.claim(&name);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            decay_exempt,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        self.claim(&name);
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all trainable parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `g` into the gradient of `id`, creating it if absent.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(g) {
                    *a += *v;
                }
            }
            None => p.grad = Some(Tensor::from_parts(p.value.shape().to_vec(), g.to_vec())),
        }
    }

    /// Copy every value into a store of another element type, keeping ids.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    decay_exempt: p.decay_exempt,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }

    /// Overwrite values from `(name, tensor)` pairs; every parameter and
    /// buffer must be present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = 0usize;
        for (name, t) in entries {
            let slot = if let Some(id) = self.find(name) {
                &mut self.params[id.0].value
            } else if let Some(id) = self.find_buffer(name) {
                &mut self.buffers[id.0].value
            } else {
                return Err(Error::config(format!("checkpoint entry `{name}` is not in the model")));
            };
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "load",
                    format!("`{name}`: model {:?}, checkpoint {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t.clone();
            seen += 1;
        }
        let expected = self.params.len() + self.buffers.len();
        if seen != expected {
            return Err(Error::config(format!(
                "checkpoint has {seen} of the model's {expected} tensors"
            )));
        }
        Ok(())
    }

    /// All parameters then all buffers, as owned `(name, tensor)` pairs.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .chain(self.buffers.iter().map(|b| (b.name.clone(), b.value.clone())))
            .collect()
    }
}

/// Registers parameters under hierarchical dotted names with seeded init.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Run `f` with `name` appended to the name prefix.
    pub fn scope<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.as_ref().to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, decay_exempt: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value, decay_exempt)
    }

    /// Weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), -b, b, &mut self.rng);
        self.tensor(name, t, false)
    }

    /// Bias drawn like a weight of the same fan-in; decay exempt.
    pub fn bias(&mut self, name: &str, len: usize, fan_in: usize) -> ParamId {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(vec![len], -b, b, &mut self.rng);
        self.tensor(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], decay_exempt: bool) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()), decay_exempt)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], decay_exempt: bool) -> ParamId {
        self.tensor(name, Tensor::ones(shape.to_vec()), decay_exempt)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64, decay_exempt: bool) -> ParamId {
        let t = Tensor::uniform(shape.to_vec(), lo, hi, &mut self.rng);
        self.tensor(name, t, decay_exempt)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let full = self.full_name(name);
        self.store.add_buffer(full, value)
    }

    pub fn sample_f64(&mut self) -> f64 {
        self.rng.gen()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) pass over a model.
///
/// Owns the tape and borrows the store mutably, since train-mode batch
/// norm updates running statistics. Dereferences to the tape so ops can
/// take `&mut Tape` directly.
pub struct Session<'a, T> {
    tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    leaves: Vec<Option<Var<T>>>,
}

impl<'a, T: Element> Session<'a, T> {
    /// Gradient-recording session.
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::new())
    }

    /// Forward-only eval session; nothing is recorded.
    pub fn inference(store: &'a mut ParamStore<T>) -> Self {
        Self::untracked(store, Mode::Eval)
    }

    /// Forward-only session in the given mode.
    pub fn untracked(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(store, mode, Tape::no_grad())
    }

    fn with_tape(store: &'a mut ParamStore<T>, mode: Mode, tape: Tape<T>) -> Self {
        let n = store.len();
        Session {
            tape,
            store,
            mode,
            leaves: vec![None; n],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Parameters must not be added through this while the session is live.
    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// The tape leaf for a parameter; created once per session.
    pub fn param(&mut self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.leaves[id.0] {
            return v.clone();
        }
        let value = self.store.value(id).clone();
        let v = self.tape.param_leaf(id, value);
        self.leaves[id.0] = Some(v.clone());
        v
    }

    /// Reverse sweep from `loss`, adding parameter gradients into the store.
    /// Gradients accumulate across calls until [`ParamStore::zero_grad`].
    /// The returned value still answers input-gradient queries.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<Gradients<T>> {
        let grads = self.tape.backward(loss)?;
        for (id, g) in grads.params() {
            self.store.accumulate_grad(*id, g);
        }
        Ok(grads)
    }
}

impl<T> Deref for Session<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
